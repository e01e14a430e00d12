"""Fitting the calibrated model: temperature, threshold, relabeling and the
epistemic calibrator that turns u(x) into a (c+1)-th logit.

The fit is sequential: the temperature is frozen before the calibrator is
trained, and the calibrator sees standardized u values.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from ._util import ceil_product
from .data_model import Dataset
from .epistemic import EpistemicEstimator, fit_estimator
from .errors import FitError, InputError, ModelFormatError, NumericError

MODEL_VERSION = 1
TAU_MIN, TAU_MAX = 0.05, 20.0
TAU_TOL = 1e-6
MIN_THRESHOLD_SAMPLES = 20
FORMS = ("linear", "mlp")

ITERATIONS = 2000
STEP = 0.05
MOMENTUM = 0.9
INIT_NOISE = 1e-2
CONSTANT_GRID = 101

_INV_PHI = (math.sqrt(5) - 1) / 2


class DegenerateThresholdWarning(UserWarning):
    pass


# ------------------------------------------------------------------ temperature


def golden_section(f, lo: float, hi: float, tol: float = TAU_TOL) -> float:
    """Minimise a unimodal ``f`` on ``[lo, hi]`` to absolute tolerance ``tol``."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (a + b) / 2


def temperature_nll(logits: np.ndarray, labels: np.ndarray, tau: float) -> float:
    """Mean ``-log softmax(logits / tau)[label]`` over in-domain records."""
    z = np.asarray(logits, dtype=float) / tau
    idx = np.asarray(labels) - 1
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(z.shape[0]), idx]))


def fit_temperature(validation: Dataset) -> float:
    """Cross-entropy optimal temperature in ``[0.05, 20]`` by golden-section
    search. The result is never worse on the validation data than ``tau=1``
    or either end of the interval."""
    if len(validation) == 0:
        raise FitError("cannot fit a temperature on an empty validation set")
    if np.any(validation.labels > validation.c):
        raise FitError("temperature must be fitted on in-domain labels only")
    logits, labels = validation.logits, validation.labels

    def objective(t):
        return temperature_nll(logits, labels, t)

    best = golden_section(objective, TAU_MIN, TAU_MAX)
    candidates = [best, 1.0, TAU_MIN, TAU_MAX]
    values = [objective(t) for t in candidates]
    return float(candidates[int(np.argmin(values))])


# -------------------------------------------------------- threshold & relabeling


def fit_threshold(u_values, alpha: float = 0.95) -> float:
    """Rejection threshold at the ``alpha`` percentile of validation scores.

    With ``k = ceil(alpha * m)`` the threshold is the (k+1)-th smallest
    score, so that exactly ``m - k`` distinct scores satisfy ``u >= theta``.
    When ``k == m`` the threshold sits one unit above the largest score.
    """
    u = np.sort(np.asarray(u_values, dtype=float).reshape(-1))
    m = u.shape[0]
    if not 0 < alpha < 1:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    if m < MIN_THRESHOLD_SAMPLES:
        raise FitError(f"need at least {MIN_THRESHOLD_SAMPLES} validation scores for a threshold, got {m}")
    if not np.all(np.isfinite(u)):
        raise FitError("validation scores contain non-finite values")
    k = ceil_product(alpha, m)
    theta = float(u[k]) if k < m else float(u[-1] + 1.0)
    rejected = int(np.count_nonzero(u >= theta))
    if rejected > m - k:
        warnings.warn(
            f"tied scores at the threshold: {rejected} of {m} validation points satisfy u >= theta "
            f"(nominal {m - k})",
            DegenerateThresholdWarning,
            stacklevel=2,
        )
    return theta


def relabel(validation: Dataset, estimator: EpistemicEstimator, theta: float) -> Dataset:
    """Copy of ``validation`` where every record with ``u >= theta`` gets label c+1."""
    u = estimator.score_dataset(validation)
    labels = np.where(u >= theta, validation.c + 1, validation.labels)
    return validation.replace(labels=labels)


# ------------------------------------------------------------ epistemic calibrator


@dataclass(frozen=True, eq=False)
class EpistemicCalibrator:
    """Scalar map from u to the abstention logit.

    ``linear``: ``slope * z + intercept``. ``mlp``: ``skip * z + bias +
    sum_k w_out[k] * tanh(w_in[k] * z + b_in[k])``. In both, ``z = (u -
    u_mean) / u_std`` with constants taken from the validation scores.
    """

    form: str
    params: np.ndarray
    u_mean: float = 0.0
    u_std: float = 1.0

    def __post_init__(self):
        if self.form not in FORMS:
            raise InputError(f"unknown calibrator form {self.form!r}; expected one of {FORMS}")
        p = np.array(self.params, dtype=float).reshape(-1)
        if self.form == "linear" and p.size != 2:
            raise InputError("linear calibrator has exactly 2 parameters")
        if self.form == "mlp" and (p.size < 5 or (p.size - 2) % 3):
            raise InputError("mlp calibrator needs 2 + 3h parameters with h >= 1")
        if not np.all(np.isfinite(p)):
            raise NumericError("calibrator parameters must be finite")
        if not (math.isfinite(self.u_mean) and math.isfinite(self.u_std) and self.u_std > 0):
            raise InputError("standardization constants must be finite with u_std > 0")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    @property
    def hidden(self) -> int:
        return 0 if self.form == "linear" else (self.params.size - 2) // 3

    def _parts(self, p=None):
        p = self.params if p is None else p
        h = (p.size - 2) // 3
        return p[0], p[1], p[2:2 + h], p[2 + h:2 + 2 * h], p[2 + 2 * h:]

    def standardize(self, u) -> np.ndarray:
        return (np.asarray(u, dtype=float) - self.u_mean) / self.u_std

    def forward(self, z, params=None):
        """Abstention logit for standardized inputs ``z``; returns
        ``(g, hidden_activations)``."""
        p = self.params if params is None else params
        z = np.asarray(z, dtype=float)
        if self.form == "linear":
            return p[0] * z + p[1], None
        skip, bias, w_in, b_in, w_out = self._parts(p)
        # hidden activations laid out (h, n): contiguous rows per unit
        act = np.multiply.outer(w_in, z)
        act += b_in[:, None]
        np.tanh(act, out=act)
        return (skip * z + bias) + w_out @ act, act

    def backward(self, z, dg, act, params=None) -> np.ndarray:
        """Gradient of ``sum(dg * g(z))`` with respect to the parameters."""
        p = self.params if params is None else params
        z = np.asarray(z, dtype=float)
        if self.form == "linear":
            return np.array([np.dot(dg, z), np.sum(dg)])
        _, _, _, _, w_out = self._parts(p)
        # act is overwritten in place by tanh' = 1 - act**2 after its last use
        grad_out = act @ dg
        np.multiply(act, act, out=act)
        np.subtract(1.0, act, out=act)
        act *= dg
        grad_pre = act.sum(axis=1)
        return np.concatenate(([np.dot(dg, z), np.sum(dg)], w_out * (act @ z), w_out * grad_pre, grad_out))

    def __call__(self, u) -> np.ndarray:
        return self.forward(self.standardize(u))[0]

    def with_params(self, params) -> "EpistemicCalibrator":
        return EpistemicCalibrator(self.form, params, self.u_mean, self.u_std)

    def to_dict(self) -> dict:
        if self.form == "linear":
            params = {"slope": float(self.params[0]), "intercept": float(self.params[1])}
        else:
            skip, bias, w_in, b_in, w_out = self._parts()
            params = {
                "skip": float(skip), "bias": float(bias),
                "w_in": w_in.tolist(), "b_in": b_in.tolist(), "w_out": w_out.tolist(),
            }
        return {"form": self.form, "params": params, "u_mean": float(self.u_mean), "u_std": float(self.u_std)}

    @classmethod
    def from_dict(cls, data: dict) -> "EpistemicCalibrator":
        form = data["form"]
        p = data["params"]
        if form == "linear":
            vec = [p["slope"], p["intercept"]]
        elif form == "mlp":
            if not (len(p["w_in"]) == len(p["b_in"]) == len(p["w_out"])):
                raise InputError("mlp hidden layer arrays have different lengths")
            vec = [p["skip"], p["bias"], *p["w_in"], *p["b_in"], *p["w_out"]]
        else:
            raise InputError(f"unknown calibrator form {form!r}")
        return cls(form, np.array(vec, dtype=float), float(data["u_mean"]), float(data["u_std"]))

    def __eq__(self, other):
        if not isinstance(other, EpistemicCalibrator):
            return NotImplemented
        return (self.form == other.form and np.array_equal(self.params, other.params)
                and self.u_mean == other.u_mean and self.u_std == other.u_std)


def constant_calibrator(value: float, form: str = "linear", hidden: int = 1) -> EpistemicCalibrator:
    """Calibrator returning ``value`` for every u."""
    if form == "linear":
        return EpistemicCalibrator("linear", [0.0, value])
    return EpistemicCalibrator("mlp", np.concatenate(([0.0, value], np.zeros(3 * hidden))))


class ExtendedLoss:
    """Cross-entropy of the extended (c+1)-way softmax with the calibrator's
    output as the last logit, averaged over the relabeled validation set.

    Only the calibrator parameters vary, so the in-domain part of the
    log-partition is precomputed once.
    """

    def __init__(self, scaled_logits: np.ndarray, labels: np.ndarray, z: np.ndarray):
        scaled_logits = np.asarray(scaled_logits, dtype=float)
        self.m, self.c = scaled_logits.shape
        self.labels = np.asarray(labels)
        self.z = np.asarray(z, dtype=float)
        self.is_out = self.labels == self.c + 1
        self.lse_in = logsumexp(scaled_logits, axis=1)
        idx = np.where(self.is_out, 0, self.labels - 1)
        self.target_in = scaled_logits[np.arange(self.m), idx]

    def value(self, cal: EpistemicCalibrator, params=None) -> float:
        g, _ = cal.forward(self.z, params)
        return self._loss(g)

    def _loss(self, g):
        lse = np.logaddexp(self.lse_in, g)
        return float(np.mean(lse - np.where(self.is_out, g, self.target_in)))

    def value_and_grad(self, cal: EpistemicCalibrator, params=None):
        p = cal.params if params is None else params
        g, act = cal.forward(self.z, p)
        log_z = np.logaddexp(self.lse_in, g)
        loss = float(np.mean(log_z - np.where(self.is_out, g, self.target_in)))
        # d loss_i / d g_i = P(abstain | x_i) - [y_i = c+1]
        dg = np.exp(g - log_z)
        dg -= self.is_out
        dg /= self.m
        return loss, cal.backward(self.z, dg, act, p)


def _standardization(u: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(u))
    std = float(np.std(u))
    return mean, (std if std > 0 and math.isfinite(std) else 1.0)


def _momentum_descent(loss: ExtendedLoss, cal: EpistemicCalibrator, mask: np.ndarray | None,
                      iterations: int, step: float, momentum: float):
    """Full-batch heavy-ball descent; returns the best iterate seen
    (the starting point included) and its loss."""
    p = np.array(cal.params, dtype=float)
    velocity = np.zeros_like(p)
    best_p, best_loss = p.copy(), math.inf
    for it in range(iterations + 1):
        value, grad = loss.value_and_grad(cal, p)
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise NumericError(f"non-finite calibrator loss at iteration {it}")
        if value < best_loss:
            best_loss, best_p = value, p.copy()
        if it == iterations:
            break
        if mask is not None:
            grad = grad * mask
        velocity = momentum * velocity - step * grad
        p = p + velocity
    return cal.with_params(best_p), best_loss


def best_constant_on_grid(loss: ExtendedLoss, lo: float, hi: float, n: int = CONSTANT_GRID):
    """Best constant abstention logit among ``n`` evenly spaced values."""
    grid = np.linspace(lo, hi, n)
    values = [loss._loss(np.full(loss.m, b)) for b in grid]
    i = int(np.argmin(values))
    return float(grid[i]), float(values[i])


@dataclass
class CalibratorFitInfo:
    loss: float
    linear_loss: float
    constant: float
    constant_loss: float
    init: str
    iterations: int
    relabeled: int


def fit_epistemic_calibrator_detailed(
    relabeled: Dataset, tau: float, estimator: EpistemicEstimator, form: str = "mlp",
    seed: int = 0, *, hidden: int = 8, iterations: int = ITERATIONS, step: float = STEP,
    momentum: float = MOMENTUM, fit_slope: bool = True,
) -> tuple[EpistemicCalibrator, CalibratorFitInfo]:
    if form not in FORMS:
        raise InputError(f"unknown calibrator form {form!r}; expected one of {FORMS}")
    if hidden < 1:
        raise InputError("hidden width must be >= 1")
    labels = relabeled.labels
    n_out = int(np.count_nonzero(labels == relabeled.c + 1))
    if n_out == 0:
        raise FitError("relabeled validation set has no c+1 labels; nothing to calibrate against")
    if n_out == len(relabeled):
        raise FitError("relabeled validation set has no in-domain labels")
    u = estimator.score_dataset(relabeled)
    u_mean, u_std = _standardization(u)
    scaled = relabeled.logits / tau
    z = (u - u_mean) / u_std
    loss = ExtendedLoss(scaled, labels, z)

    const, const_loss = best_constant_on_grid(loss, float(scaled.min()), float(scaled.max()))
    # least-squares line through the (sorted u, sorted max-logit) quantile pairs
    # puts the abstention logit on the same scale as the class logits
    zq, mq = np.sort(z), np.sort(scaled.max(axis=1))
    slope, intercept = np.polyfit(zq, mq, 1) if fit_slope and np.ptp(zq) > 0 else (0.0, float(np.mean(mq)))
    ls_init = EpistemicCalibrator("linear", [slope, intercept], u_mean, u_std)
    const_init = EpistemicCalibrator("linear", [0.0, const], u_mean, u_std)
    if loss.value(ls_init) < const_loss:
        start, init_name = ls_init, "quantile-least-squares"
    else:
        start, init_name = const_init, "best-constant"
    mask = None if fit_slope else np.array([0.0, 1.0])
    if not fit_slope:
        start = const_init
        init_name = "best-constant"
    linear, linear_loss = _momentum_descent(loss, start, mask, iterations, step, momentum)

    if form == "linear":
        return linear, CalibratorFitInfo(linear_loss, linear_loss, const, const_loss, init_name,
                                         iterations, n_out)

    # hidden units start with knees spread over the standardized range and zero
    # output weights, so the initial mlp computes exactly the fitted line
    rng = np.random.default_rng(seed)
    w_in = 1.0 + rng.uniform(-INIT_NOISE, INIT_NOISE, hidden)
    b_in = np.linspace(-2.0, 2.0, hidden) + rng.uniform(-INIT_NOISE, INIT_NOISE, hidden)
    w_out = np.zeros(hidden)
    init = np.concatenate((linear.params, w_in, b_in, w_out))
    mlp = EpistemicCalibrator("mlp", init, u_mean, u_std)
    mlp, mlp_loss = _momentum_descent(loss, mlp, None, iterations, step, momentum)
    return mlp, CalibratorFitInfo(mlp_loss, linear_loss, const, const_loss, init_name,
                                  iterations, n_out)


def fit_epistemic_calibrator(relabeled: Dataset, tau: float, estimator: EpistemicEstimator,
                             form: str = "mlp", seed: int = 0, **kwargs) -> EpistemicCalibrator:
    """Minimise the extended cross-entropy over the calibrator parameters.

    Linear fits start from the better of a quantile least-squares line and
    the best constant on a 101-point grid; the mlp starts from the fitted
    line. Both run full-batch momentum descent and keep the best iterate,
    so the result never loses to its starting point.
    """
    return fit_epistemic_calibrator_detailed(relabeled, tau, estimator, form, seed, **kwargs)[0]


def gradient_check(cal: EpistemicCalibrator, loss: ExtendedLoss, n_points: int = 10,
                   seed: int = 0, h: float = 1e-6, scale: float = 1.0) -> float:
    """Largest norm-relative gap between analytic and central-difference
    gradients over ``n_points`` random parameter vectors."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        p = rng.normal(0.0, scale, cal.params.size)
        _, analytic = loss.value_and_grad(cal, p)
        numeric = np.empty_like(p)
        for i in range(p.size):
            e = np.zeros_like(p)
            e[i] = h
            numeric[i] = (loss.value(cal, p + e) - loss.value(cal, p - e)) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


# ---------------------------------------------------------------------- the model


@dataclass(frozen=True, eq=False)
class CalibratedModel:
    c: int
    tau: float
    theta: float
    tau_u: EpistemicCalibrator
    estimator: EpistemicEstimator
    alpha: float = 0.95

    def __post_init__(self):
        if not (isinstance(self.c, int) and self.c >= 1):
            raise InputError("c must be a positive integer")
        if not (TAU_MIN <= self.tau <= TAU_MAX):
            raise InputError(f"tau={self.tau} outside [{TAU_MIN}, {TAU_MAX}]")
        if not 0 < self.alpha < 1:
            raise InputError(f"alpha={self.alpha} outside (0, 1)")
        if not math.isfinite(self.theta):
            raise InputError("theta must be finite")

    def replace(self, **changes) -> "CalibratedModel":
        fields = dict(c=self.c, tau=self.tau, theta=self.theta, tau_u=self.tau_u,
                      estimator=self.estimator, alpha=self.alpha)
        fields.update(changes)
        return CalibratedModel(**fields)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "c": self.c,
            "tau": float(self.tau),
            "theta": float(self.theta),
            "alpha": float(self.alpha),
            "tau_u": self.tau_u.to_dict(),
            "estimator": self.estimator.to_dict(),
        }

    def __eq__(self, other):
        if not isinstance(other, CalibratedModel):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def model_to_json(m: CalibratedModel) -> str:
    # json writes floats with repr, the shortest string that round-trips exactly
    return json.dumps(m.to_dict(), indent=2, allow_nan=False) + "\n"


def model_from_dict(data) -> CalibratedModel:
    if not isinstance(data, dict):
        raise ModelFormatError("model file must hold a JSON object")
    if data.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"version mismatch: file has {data.get('version')!r}, expected {MODEL_VERSION}")
    for key in ("c", "tau", "theta", "alpha", "tau_u", "estimator"):
        if key not in data:
            raise ModelFormatError(f"missing field {key!r}")
    tu = data["tau_u"]
    if not isinstance(tu, dict) or tu.get("form") not in FORMS:
        raise ModelFormatError(f"field 'tau_u.form': unknown value {tu.get('form') if isinstance(tu, dict) else tu!r}")
    est = data["estimator"]
    if not isinstance(est, dict) or est.get("kind") not in ("maxlogit", "mahalanobis", "knn", "ash", "passthrough"):
        raise ModelFormatError(f"field 'estimator.kind': unknown value {est.get('kind') if isinstance(est, dict) else est!r}")
    try:
        tau_u = EpistemicCalibrator.from_dict(tu)
    except (KeyError, TypeError, ValueError, InputError, NumericError) as exc:
        raise ModelFormatError(f"field 'tau_u': {exc}") from None
    try:
        estimator = EpistemicEstimator.from_dict(est)
    except (KeyError, TypeError, ValueError, InputError, NumericError) as exc:
        raise ModelFormatError(f"field 'estimator': {exc}") from None
    try:
        return CalibratedModel(int(data["c"]), float(data["tau"]), float(data["theta"]),
                               tau_u, estimator, float(data["alpha"]))
    except (InputError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invariant violated: {exc}") from None


def save_model(m: CalibratedModel, path) -> None:
    Path(path).write_text(model_to_json(m), encoding="utf-8")


def load_model(path) -> CalibratedModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ModelFormatError(f"model file not found: {path}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: malformed JSON: {exc}") from None
    return model_from_dict(data)


# ------------------------------------------------------------------- end to end


@dataclass
class FitLog:
    tau: float
    theta: float
    alpha: float
    m: int
    relabeled: int
    expected_relabeled: int
    form: str
    estimator: str
    final_loss: float
    linear_loss: float
    constant_loss: float
    init: str
    grad_check_max_rel_err: float
    grad_check_passed: bool
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.update(d.pop("extra"))
        return d


GRAD_CHECK_TOL = 1e-4


def fit_model(validation: Dataset, estimator_kind: str = "maxlogit", *, alpha: float = 0.95,
              form: str = "mlp", hidden: int = 8, seed: int = 0, k: int = 5,
              ash_p: float = 0.1, ash_fill: float = 1.0, head=None,
              iterations: int = ITERATIONS) -> tuple[CalibratedModel, FitLog]:
    """Temperature, estimator, threshold, relabel, calibrator; in that order."""
    tau = fit_temperature(validation)
    estimator = fit_estimator(estimator_kind, validation, k=k, ash_p=ash_p, ash_fill=ash_fill, head=head)
    u = estimator.score_dataset(validation)
    theta = fit_threshold(u, alpha)
    relabeled = relabel(validation, estimator, theta)
    cal, info = fit_epistemic_calibrator_detailed(relabeled, tau, estimator, form, seed,
                                                  hidden=hidden, iterations=iterations)
    loss = ExtendedLoss(relabeled.logits / tau, relabeled.labels, cal.standardize(u))
    grad_err = gradient_check(cal, loss, n_points=10, seed=seed)
    m = len(validation)
    model = CalibratedModel(validation.c, tau, theta, cal, estimator, alpha)
    log = FitLog(
        tau=tau, theta=theta, alpha=alpha, m=m, relabeled=info.relabeled,
        expected_relabeled=m - ceil_product(alpha, m), form=form, estimator=estimator_kind,
        final_loss=info.loss, linear_loss=info.linear_loss, constant_loss=info.constant_loss,
        init=info.init, grad_check_max_rel_err=grad_err, grad_check_passed=grad_err < GRAD_CHECK_TOL,
    )
    return model, log
