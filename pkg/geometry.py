"""
Explanation Lab - Level-Set Geometry
Differential geometry of the constant-output hypersurface S = {x : g(x) = c}:
unit normal, second fundamental form, principal curvatures, the weight-based
curvature bound, 2-D level-set tracing with arc length as geodesic distance,
and Monte-Carlo checks of the smoothing/noise-averaging correspondence.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import qr
from scipy.special import expit, logit
from scipy.stats import kstest

from core_net import (
    Activation,
    DenseLayer,
    Network,
    grad_input,
    hessian,
    predict,
    with_activation,
)
from errors import AsymmetricMatrixError, DimensionError, NonSmoothNetworkError, VanishingGradientError

logger = logging.getLogger(__name__)

EPS_GRAD = 1e-10
NEWTON_MAX_ITER = 20
NEWTON_TOL = 1e-10
THEOREM1_SLACK = 1e-6
SYMMETRY_TOL = 1e-8
MC_CHUNK = 65536


# -- scalar fields -----------------------------------------------------------------------------

class ScalarField(Protocol):
    dim: int

    def value(self, x: np.ndarray) -> float: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...

    def hessian(self, x: np.ndarray) -> np.ndarray: ...


class NetworkField:
    """Winning-class output g_k of a softplus network"""

    def __init__(self, net: Network, class_index: int = 0):
        if not net.hidden_activation.smooth:
            raise NonSmoothNetworkError("NetworkField")
        self.net = net
        self.class_index = class_index
        self.dim = net.input_dim

    @property
    def beta(self) -> float:
        return self.net.hidden_activation.beta

    def value(self, x: np.ndarray) -> float:
        return float(predict(self.net, np.asarray(x, dtype=np.float64))[self.class_index])

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return grad_input(self.net, np.asarray(x, dtype=np.float64), self.class_index)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        return hessian(self.net, np.asarray(x, dtype=np.float64), self.class_index)

    def bound_constant(self) -> float:
        return curvature_bound_constant(self.net)


class QuadraticField:
    """f(x) = x^T A x + b^T x + c"""

    def __init__(self, A: np.ndarray, b: Optional[np.ndarray] = None, c: float = 0.0):
        self.A = np.asarray(A, dtype=np.float64)
        self.dim = self.A.shape[0]
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=np.float64)
        self.c = float(c)

    @classmethod
    def sphere(cls, dim: int) -> "QuadraticField":
        """||x||^2, whose level sets are spheres centred at the origin"""
        return cls(np.eye(dim))

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(x @ self.A @ x + self.b @ x + self.c)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return (self.A + self.A.T) @ np.asarray(x, dtype=np.float64) + self.b

    def hessian(self, x: np.ndarray) -> np.ndarray:
        return self.A + self.A.T


class LinearField:
    def __init__(self, w: np.ndarray, b: float = 0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)
        self.dim = self.w.size

    def value(self, x: np.ndarray) -> float:
        return float(self.w @ np.asarray(x, dtype=np.float64) + self.b)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.w.copy()

    def hessian(self, x: np.ndarray) -> np.ndarray:
        return np.zeros((self.dim, self.dim))


def toy_network(seed: int, hidden: int = 50, beta: Optional[float] = 1.0) -> Network:
    """f(x) = V^T softplus_beta(W^T x) on R^2 with W, V entries ~ U(-1, 1) and no biases.

    ``beta=None`` gives the relu network.
    """
    rng = np.random.default_rng(seed)
    W = rng.uniform(-1.0, 1.0, size=(2, hidden))
    V = rng.uniform(-1.0, 1.0, size=hidden)
    activation = Activation.relu() if beta is None else Activation.softplus(beta)
    layers = (DenseLayer(W.T, np.zeros(hidden)), DenseLayer(V.reshape(1, -1), np.zeros(1)))
    return Network(layers, activation, 1)


# -- local geometry ---------------------------------------------------------------------------------

def unit_normal(f: ScalarField, x: np.ndarray, eps_grad: float = EPS_GRAD) -> np.ndarray:
    gradient = f.gradient(x)
    norm = float(np.linalg.norm(gradient))
    if norm <= eps_grad:
        raise VanishingGradientError(norm, eps_grad)
    return gradient / norm


def tangent_basis(normal: np.ndarray) -> np.ndarray:
    """Orthonormal basis (d x d-1) of the complement of ``normal`` via pivoted QR of I - n n^T"""
    d = normal.size
    projector = np.eye(d) - np.outer(normal, normal)
    Q, _, _ = qr(projector, pivoting=True)
    return Q[:, :d - 1]


@dataclass
class FundamentalForm:
    matrix: np.ndarray
    basis: np.ndarray
    normal: np.ndarray
    gradient_norm: float


def second_fundamental_form(f: ScalarField, p: np.ndarray, eps_grad: float = EPS_GRAD) -> FundamentalForm:
    """-E^T H E / ||grad f|| in the tangent basis E at ``p``.

    With the normal pointing along the gradient, spheres ||x||^2 = r^2 get
    all entries -1/r on the diagonal.
    """
    p = np.asarray(p, dtype=np.float64)
    gradient = f.gradient(p)
    norm = float(np.linalg.norm(gradient))
    if norm <= eps_grad:
        raise VanishingGradientError(norm, eps_grad)
    normal = gradient / norm
    basis = tangent_basis(normal)
    form = -(basis.T @ f.hessian(p) @ basis) / norm
    return FundamentalForm(0.5 * (form + form.T), basis, normal, norm)


def principal_curvatures(form: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric form, sorted by descending absolute value.

    Args:
        form: symmetric (d-1) x (d-1) matrix

    Returns:
        1-D array of real eigenvalues

    Raises:
        AsymmetricMatrixError: if ``form`` is not symmetric within tolerance
    """
    form = np.asarray(form, dtype=np.float64)
    if form.ndim != 2 or form.shape[0] != form.shape[1]:
        raise DimensionError(f"form must be square, got shape {form.shape}")
    if form.size == 0:
        return np.zeros(0)
    asymmetry = float(np.max(np.abs(form - form.T)))
    if asymmetry > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(form)))):
        raise AsymmetricMatrixError(asymmetry, SYMMETRY_TOL)
    eigenvalues = np.linalg.eigvalsh(0.5 * (form + form.T))
    order = np.argsort(-np.abs(eigenvalues), kind="stable")
    return eigenvalues[order]


def curvature_bound_constant(net: Network) -> float:
    """C~ = sum_m (prod_{l>m} ||W^l||_F) * ||W^m||_F^2 * prod_{l<m} ||W^l||_F^2.

    Args:
        net: network whose layers supply W^1 .. W^L

    Returns:
        non-negative scalar; beta * C~ / ||grad g(p)|| bounds the largest
        absolute principal curvature at p for softplus_beta networks
    """
    norms = [float(np.linalg.norm(layer.weights)) for layer in net.layers]
    total = 0.0
    for m in range(len(norms)):
        above = float(np.prod(norms[m + 1:])) if m + 1 < len(norms) else 1.0
        below = float(np.prod(np.square(norms[:m]))) if m > 0 else 1.0
        total += above * norms[m] ** 2 * below
    return total


@dataclass
class CurvatureReport:
    point: np.ndarray
    normal: np.ndarray
    fundamental_form: np.ndarray
    principal_curvatures: np.ndarray
    lambda_max: float
    gradient_norm: float
    bound_constant: Optional[float] = None
    beta: Optional[float] = None

    @property
    def bound(self) -> Optional[float]:
        if self.bound_constant is None or self.beta is None:
            return None
        return self.beta * self.bound_constant / self.gradient_norm

    @property
    def bound_holds(self) -> Optional[bool]:
        bound = self.bound
        return None if bound is None else bool(self.lambda_max <= bound)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload.update(bound=self.bound, bound_holds=self.bound_holds,
                       geodesic_distance="symbolic" if self.point.size > 2 else "arc length")
        return payload


def curvature_report(f: ScalarField, p: np.ndarray) -> CurvatureReport:
    form = second_fundamental_form(f, p)
    curvatures = principal_curvatures(form.matrix)
    is_network = isinstance(f, NetworkField)
    return CurvatureReport(
        point=np.asarray(p, dtype=np.float64),
        normal=form.normal,
        fundamental_form=form.matrix,
        principal_curvatures=curvatures,
        lambda_max=float(np.max(np.abs(curvatures))) if curvatures.size else 0.0,
        gradient_norm=form.gradient_norm,
        bound_constant=f.bound_constant() if is_network else None,
        beta=f.beta if is_network else None,
    )


# -- level-set tracing ----------------------------------------------------------------------------------

@dataclass
class LevelSetTrace:
    points: np.ndarray
    level: float
    arc_lengths: np.ndarray
    closed: bool = False
    error: Optional[str] = None

    @property
    def length(self) -> float:
        return float(self.arc_lengths[-1]) if self.arc_lengths.size else 0.0

    @property
    def partial(self) -> bool:
        return self.error is not None

    def geodesic_distances(self, index: int) -> np.ndarray:
        """On-curve distance from vertex ``index`` to every vertex"""
        distances = np.abs(self.arc_lengths - self.arc_lengths[index])
        if self.closed:
            distances = np.minimum(distances, self.length - distances)
        return distances


def _newton_correct(f: ScalarField, q: np.ndarray, level: float, eps_grad: float) -> Tuple[np.ndarray, Optional[str]]:
    for _ in range(NEWTON_MAX_ITER):
        residual = f.value(q) - level
        if abs(residual) < NEWTON_TOL:
            return q, None
        gradient = f.gradient(q)
        squared = float(gradient @ gradient)
        if squared <= eps_grad ** 2:
            return q, f"gradient collapsed during correction (|grad|={np.sqrt(squared):.3e})"
        q = q - residual * gradient / squared
    residual = f.value(q) - level
    if abs(residual) < NEWTON_TOL:
        return q, None
    return q, f"corrector did not converge in {NEWTON_MAX_ITER} iterations (residual {residual:.3e})"


def trace_level_set_2d(f: ScalarField, p0: Sequence[float], arc_budget: float, step: float,
                       close_loop: bool = True, box: Optional[float] = None,
                       eps_grad: float = EPS_GRAD) -> LevelSetTrace:
    """Predictor-corrector trace of {f = f(p0)} in the plane.

    Predictor: a step of length ``step`` along the normal rotated by 90
    degrees. Corrector: Newton steps along the gradient until |f - c| < 1e-10.
    Arc length accumulates the actual chord lengths. The trace stops at
    ``arc_budget``, when it closes on itself (``close_loop``), or when it
    leaves the square [-box, box]^2. Gradient collapse or corrector failure
    returns the partial trace with ``error`` set.
    """
    p = np.asarray(p0, dtype=np.float64)
    if p.shape != (2,) or getattr(f, "dim", 2) != 2:
        raise DimensionError(f"level-set tracing needs a 2-D field and point, got point shape {p.shape}")
    if step <= 0 or arc_budget < 0:
        raise ValueError(f"need step > 0 and arc_budget >= 0, got {step}, {arc_budget}")
    level = f.value(p)
    start = p.copy()
    points, arcs = [p.copy()], [0.0]
    closed, error = False, None

    while arcs[-1] < arc_budget - 1e-12:
        try:
            normal = unit_normal(f, p, eps_grad)
        except VanishingGradientError as e:
            error = str(e)
            break
        h = min(step, arc_budget - arcs[-1])
        tangent = np.array([-normal[1], normal[0]])
        q, error = _newton_correct(f, p + h * tangent, level, eps_grad)
        if error is not None:
            break
        arcs.append(arcs[-1] + float(np.linalg.norm(q - p)))
        points.append(q)
        p = q
        if box is not None and np.max(np.abs(p)) > box:
            break
        if close_loop and arcs[-1] > 4 * step and np.linalg.norm(p - start) < step:
            arcs.append(arcs[-1] + float(np.linalg.norm(start - p)))
            points.append(start.copy())
            closed = True
            break

    if error is not None:
        logger.warning(f"level-set trace stopped after {len(points)} vertices: {error}")
    return LevelSetTrace(np.array(points), level, np.array(arcs), closed, error)


# -- curvature bound check along a trace ------------------------------------------------------------------

@dataclass
class Theorem1Report:
    vertex_count: int
    pair_count: int
    lambda_max: float
    min_slack: float
    worst_pair: Tuple[int, int]
    violations: int
    trace_length: float
    closed: bool
    anchored_slack: List[Dict[str, float]] = field(default_factory=list)
    vertex_curvatures: List[float] = field(default_factory=list)
    bound_constant: Optional[float] = None
    beta: Optional[float] = None
    min_gradient_norm: Optional[float] = None
    chained_bound: Optional[float] = None
    chained_bound_holds: Optional[bool] = None
    pointwise_bound_violations: Optional[int] = None

    @property
    def holds(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["holds"] = self.holds
        return payload


def verify_theorem1(f: ScalarField, trace: LevelSetTrace, slack_tol: float = THEOREM1_SLACK) -> Theorem1Report:
    """Check ||n(p_i) - n(p_j)|| <= |lambda_max| d_g(p_i, p_j) for every vertex pair.

    lambda_max is the largest absolute principal curvature over all vertices;
    for network fields the weight bound beta * C~ / min ||grad|| is checked
    as well.
    """
    points = trace.points
    normals, curvatures, gradient_norms = [], [], []
    for point in points:
        form = second_fundamental_form(f, point)
        normals.append(form.normal)
        gradient_norms.append(form.gradient_norm)
        curvatures.append(float(np.max(np.abs(principal_curvatures(form.matrix)))))
    normals = np.array(normals)
    curvatures = np.array(curvatures)
    gradient_norms = np.array(gradient_norms)
    lambda_max = float(curvatures.max()) if curvatures.size else 0.0

    n = len(points)
    min_slack, worst, violations = np.inf, (0, 0), 0
    for i in range(n - 1):
        lhs = np.linalg.norm(normals[i + 1:] - normals[i], axis=1)
        bound = lambda_max * trace.geodesic_distances(i)[i + 1:]
        slack = bound + slack_tol - lhs
        violations += int(np.sum(slack < 0))
        j = int(np.argmin(slack))
        if slack[j] < min_slack:
            min_slack, worst = float(slack[j]), (i, i + 1 + j)

    anchored_lhs = np.linalg.norm(normals - normals[0], axis=1)
    anchored_dg = trace.geodesic_distances(0)
    anchored = [
        {"index": int(i), "geodesic_distance": float(anchored_dg[i]), "normal_change": float(anchored_lhs[i]),
         "bound": float(lambda_max * anchored_dg[i]), "slack": float(lambda_max * anchored_dg[i] - anchored_lhs[i])}
        for i in range(n)
    ]

    report = Theorem1Report(
        vertex_count=n,
        pair_count=n * (n - 1) // 2,
        lambda_max=lambda_max,
        min_slack=float(min_slack) if n > 1 else float(slack_tol),
        worst_pair=worst,
        violations=violations,
        trace_length=trace.length,
        closed=trace.closed,
        anchored_slack=anchored,
        vertex_curvatures=curvatures.tolist(),
    )
    if isinstance(f, NetworkField):
        constant = f.bound_constant()
        report.bound_constant = constant
        report.beta = f.beta
        report.min_gradient_norm = float(gradient_norms.min())
        report.chained_bound = f.beta * constant / report.min_gradient_norm
        report.chained_bound_holds = bool(lambda_max <= report.chained_bound)
        report.pointwise_bound_violations = int(np.sum(curvatures > f.beta * constant / gradient_norms))
    return report


# -- p_beta noise and the smoothing correspondence ----------------------------------------------------------

def p_beta_density(eps, beta: float):
    """beta / (e^{beta eps / 2} + e^{-beta eps / 2})^2, written as beta sigma (1 - sigma)"""
    s = expit(beta * np.asarray(eps, dtype=np.float64))
    return beta * s * (1.0 - s)


def p_beta_cdf(eps, beta: float):
    return expit(beta * np.asarray(eps, dtype=np.float64))


def p_beta_quantile(u, beta: float):
    return logit(np.asarray(u, dtype=np.float64)) / beta


def p_beta_noise(rng: np.random.Generator, beta: float, size) -> np.ndarray:
    """Inverse-CDF draws eps = (1/beta) ln(u / (1 - u)) with u uniform on (0, 1)"""
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    u = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=size)
    return p_beta_quantile(u, beta)


def sample_p_beta(beta: float, seed: Union[int, Sequence[int]], count: int) -> np.ndarray:
    return p_beta_noise(np.random.default_rng(seed), beta, count)


def p_beta_variance(beta: float) -> float:
    return np.pi ** 2 / (3.0 * beta ** 2)


def ks_statistic(samples: np.ndarray, beta: float) -> float:
    """Kolmogorov-Smirnov distance between samples and the sigma_beta CDF"""
    return float(kstest(samples, lambda eps: p_beta_cdf(eps, beta)).statistic)


def sigma_for_beta(beta: float) -> float:
    """Gaussian width matching p_beta: log 2 * sqrt(2 pi) / beta"""
    return float(np.log(2.0) * np.sqrt(2.0 * np.pi) / beta)


@dataclass
class Theorem2Report:
    beta: float
    effective_beta: float
    samples: int
    mode: str
    monte_carlo: np.ndarray
    closed_form: np.ndarray
    rel_error: float
    sigma_equivalent: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def verify_theorem2(w: np.ndarray, beta: float, x: np.ndarray, samples: int,
                    seed: Union[int, Sequence[int]], mode: str = "iid") -> Theorem2Report:
    """Monte-Carlo E[grad relu(w^T (x - eps))] against grad softplus_{beta/||w||}(w^T x).

    ``mode="iid"`` draws each coordinate of eps from p_beta, which matches the
    closed form exactly when w is axis-aligned. ``mode="projected"`` draws p_beta
    noise along w / ||w||, which matches it for any w.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if not norm > 0:
        raise ValueError("w must be non-zero")
    if mode not in ("iid", "projected"):
        raise ValueError(f"mode must be 'iid' or 'projected', got {mode!r}")
    rng = np.random.default_rng(seed)
    activation = float(w @ x)

    active = 0
    remaining = samples
    while remaining > 0:
        count = min(MC_CHUNK, remaining)
        if mode == "iid":
            shift = p_beta_noise(rng, beta, (count, w.size)) @ w
        else:
            shift = norm * p_beta_noise(rng, beta, count)
        active += int(np.sum(activation - shift > 0))
        remaining -= count

    monte_carlo = (active / samples) * w
    effective_beta = beta / norm
    closed_form = float(expit(effective_beta * activation)) * w
    rel_error = float(np.linalg.norm(monte_carlo - closed_form) / np.linalg.norm(closed_form))
    return Theorem2Report(beta, effective_beta, samples, mode, monte_carlo, closed_form, rel_error,
                          sigma_for_beta(beta))


def theorem2_convergence(w: np.ndarray, beta: float, x: np.ndarray, sample_counts: Sequence[int], seed: int,
                         repeats: int = 10, mode: str = "projected") -> Dict[str, Any]:
    """RMS Monte-Carlo error per sample count and the fitted log-log slope"""
    rows = []
    for count in sample_counts:
        errors = [verify_theorem2(w, beta, x, count, [seed, repeat, count], mode).rel_error for repeat in range(repeats)]
        rows.append({"samples": int(count), "rms_rel_error": float(np.sqrt(np.mean(np.square(errors))))})
    slope, _ = np.polyfit(np.log([r["samples"] for r in rows]), np.log([r["rms_rel_error"] for r in rows]), 1)
    return {"beta": beta, "mode": mode, "repeats": repeats, "rows": rows, "slope": float(slope)}


# -- rasters ------------------------------------------------------------------------------------------------

def raster_field(net: Network, resolution: int, extent: float = 1.0, class_index: int = 0) -> np.ndarray:
    """Field values on a resolution x resolution grid over [-extent, extent]^2; row 0 is y = +extent"""
    axis = np.linspace(-extent, extent, resolution)
    xs, ys = np.meshgrid(axis, axis[::-1])
    grid = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    return predict(net, grid)[:, class_index].reshape(resolution, resolution)


def relu_counterpart(net: Network) -> Network:
    return with_activation(net, Activation.relu())
