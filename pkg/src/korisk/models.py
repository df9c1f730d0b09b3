"""Operator-aware (KO) and fully connected (FC) reconstruction models.

KO predicts ``y_hat = A+ (w * x)`` with one learned weight per sinogram
entry over the fixed Tikhonov inverse ``A+``.  FC predicts ``y_hat = M x``
with a dense learned ``M``.  Both are fit in closed form by ridge
regression; an optional ReLU is applied at evaluation time only.
"""

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InputError, NumericError
from .phantom import generate_pool
from .tomo import ForwardModel, relu

LAMBDA_GRID = (1e-6, 1e-4, 1e-2, 1.0, 1e2)
METRICS = ("mse", "rrmse2")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Stacked sinograms ``xs`` (N, v, b) and ground-truth images ``ys`` (N, h, h)."""

    xs: np.ndarray
    ys: np.ndarray
    geometry: object

    def __post_init__(self):
        g = self.geometry
        if self.xs.shape[1:] != (g.v, g.b) or self.ys.shape[1:] != (g.h, g.h):
            raise InputError("dataset arrays do not conform to the geometry")
        if len(self.xs) != len(self.ys):
            raise InputError("sinogram and image counts differ")

    @classmethod
    def from_images(cls, images, model):
        ys = np.stack([np.asarray(y, dtype=float) for y in images])
        h = model.geometry.h
        xs = (ys.reshape(len(ys), h * h) @ model.a.T).reshape(
            len(ys), model.geometry.v, model.geometry.b
        )
        return cls(xs, ys, model.geometry)

    @classmethod
    def from_seed(cls, seed, count, model):
        return cls.from_images(generate_pool(seed, count, model.geometry.h), model)

    def __len__(self):
        return len(self.xs)

    def __getitem__(self, sl):
        return Dataset(self.xs[sl], self.ys[sl], self.geometry)

    @property
    def pairs(self):
        return list(zip(self.xs, self.ys))

    @property
    def x_rows(self):
        return self.xs.reshape(len(self), -1)

    @property
    def y_rows(self):
        return self.ys.reshape(len(self), -1)


@dataclass(frozen=True, eq=False)
class KoModel:
    weights_w: np.ndarray
    model: ForwardModel
    relu_at_eval: bool = False
    loss_trace: list = field(default=None, repr=False)

    @property
    def n_params(self):
        return self.weights_w.size

    def predict_rows(self, x_rows):
        out = (x_rows * self.weights_w) @ self.model.a_pinv.T
        return relu(out) if self.relu_at_eval else out


@dataclass(frozen=True, eq=False)
class FcModel:
    m: np.ndarray
    geometry: object
    relu_at_eval: bool = False

    @property
    def n_params(self):
        return self.m.size

    def predict_rows(self, x_rows):
        out = x_rows @ self.m.T
        return relu(out) if self.relu_at_eval else out


def _check_fit_input(data):
    if len(data) == 0:
        raise InputError("cannot fit on an empty dataset")


def _solve_spd(gram, rhs, lam, what):
    """Solve ``(gram + lam I) z = rhs``; ``lam == 0`` must be well conditioned."""
    system = gram + lam * np.eye(gram.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            z = scipy.linalg.solve(system, rhs, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError) as exc:
            hint = " (use lambda > 0)" if lam == 0 else ""
            raise NumericError(f"{what} normal equations are singular{hint}: {exc}") from exc
    if not np.all(np.isfinite(z)):
        raise NumericError(f"{what} ridge solve produced non-finite values")
    return z


def ko_normal_equations(data, model):
    """Gram matrix and right-hand side of the KO least-squares problem.

    For sample ``s`` the design matrix is ``A+ diag(x_s)``, so the Gram matrix
    is ``(A+^T A+) * sum_s x_s x_s^T`` (Hadamard product).
    """
    x = data.x_rows
    gram = model.pinv_gram * (x.T @ x)
    rhs = np.sum(x * (data.y_rows @ model.a_pinv), axis=0)
    return gram, rhs


def fit_ko_ridge(data, model, lam, relu_at_eval=False, _normal=None):
    """Weights minimizing ``sum_s ||y_s - A+ (w * x_s)||^2 + lam ||w||^2``."""
    _check_fit_input(data)
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    gram, rhs = _normal if _normal is not None else ko_normal_equations(data, model)
    w = _solve_spd(gram, rhs, lam, "KO")
    return KoModel(w, model, relu_at_eval)


def fit_fc_ridge(data, lam, relu_at_eval=False, _gram=None):
    """``M = Y X^T (X X^T + lam I)^{-1}`` with samples stacked as columns.

    Evaluated through the equivalent N x N form ``Y (X^T X + lam I)^{-1} X^T``,
    which is exact and far smaller when N < v*b.
    """
    _check_fit_input(data)
    if not lam > 0:
        raise InputError(f"lambda must be > 0 for the FC fit, got {lam}")
    x, y = data.x_rows, data.y_rows
    gram = x @ x.T if _gram is None else _gram
    coef = _solve_spd(gram, y, lam, "FC")
    m = coef.T @ x
    return FcModel(m, data.geometry, relu_at_eval)


def ko_loss_and_grad(w, xs, ys, a_pinv):
    """Per-pixel mean squared error of the KO prediction and its gradient in ``w``."""
    n, n_pix = xs.shape[0], ys.shape[1]
    resid = (xs * w) @ a_pinv.T - ys
    loss = float(np.sum(resid**2) / (n * n_pix))
    grad = 2.0 / (n * n_pix) * np.sum(xs * (resid @ a_pinv), axis=0)
    return loss, grad


def fit_ko_sgd(data, model, lr, iters, batch, rng, relu_at_eval=False):
    """Minibatch gradient descent on the KO weights from ``w = 1``."""
    _check_fit_input(data)
    if lr < 0 or iters < 1 or not 1 <= batch <= len(data):
        raise InputError("need lr >= 0, iters >= 1 and 1 <= batch <= N")
    xs, ys = data.x_rows, data.y_rows
    w = np.ones(xs.shape[1])
    trace = []
    for it in range(iters):
        idx = slice(None) if batch == len(data) else rng.permutation(len(data))[:batch]
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = ko_loss_and_grad(w, xs[idx], ys[idx], model.a_pinv)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericError(f"SGD diverged at iteration {it}")
        trace.append(loss)
        w = w - lr * grad
    if not np.all(np.isfinite(w)):
        raise NumericError(f"SGD diverged at iteration {iters}")
    return KoModel(w, model, relu_at_eval, loss_trace=trace)


def predict(mdl, x):
    """Reconstruct one sinogram; returns an ``h x h`` image."""
    h = mdl.model.geometry.h if isinstance(mdl, KoModel) else mdl.geometry.h
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return mdl.predict_rows(x).reshape(h, h)


def mse(pred, truth):
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def rrmse2(pred, truth):
    """Squared relative RMSE, ``(||truth - pred|| / ||truth||)^2``."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    denom = float(np.sum(truth**2))
    if denom == 0.0:
        raise InputError("rRMSE is undefined for an all-zero ground truth")
    return float(np.sum((truth - pred) ** 2)) / denom


def dataset_error(mdl, data, metric="mse"):
    """Mean per-image error of ``mdl`` on ``data``.

    For ``rrmse2`` the mean skips all-zero ground truths.
    """
    pred = mdl.predict_rows(data.x_rows)
    truth = data.y_rows
    sq = np.sum((pred - truth) ** 2, axis=1)
    if metric == "mse":
        return float(np.mean(sq / truth.shape[1]))
    if metric == "rrmse2":
        # blank phantoms (no pixel centre inside any ellipse) have no relative error
        norms = np.sum(truth**2, axis=1)
        defined = norms > 0
        if not np.any(defined):
            raise InputError("rRMSE is undefined for an all-zero ground truth")
        return float(np.mean(sq[defined] / norms[defined]))
    raise InputError(f"unknown metric {metric!r}")


@dataclass
class Selection:
    lam: float
    fitted: object
    val_err: float
    fit_wall_ms: float = 0.0
    errors: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.lam, self.fitted, self.val_err))


def select_lambda(train, val, grid, arch, model, metric="mse", relu_at_eval=False):
    """Fit one model per grid value and keep the best validation error.

    Ties go to the smallest lambda.  Grid points whose fit raises are
    skipped and reported in ``Selection.errors``.
    """
    if not grid:
        raise InputError("lambda grid is empty")
    if arch not in ("ko", "fc"):
        raise InputError(f"unknown architecture {arch!r}")
    start = time.perf_counter()
    if arch == "ko":
        normal = ko_normal_equations(train, model)
        fit = lambda lam: fit_ko_ridge(train, model, lam, relu_at_eval, _normal=normal)
    else:
        x = train.x_rows
        gram = x @ x.T
        fit = lambda lam: fit_fc_ridge(train, lam, relu_at_eval, _gram=gram)
    best, failures = None, {}
    for lam in sorted(grid):
        try:
            mdl = fit(lam)
        except (NumericError, InputError) as exc:
            failures[lam] = str(exc)
            continue
        err = dataset_error(mdl, val, metric)
        if best is None or err < best.val_err:
            best = Selection(lam, mdl, err)
    if best is None:
        raise NumericError(f"every lambda in the grid failed: {failures}")
    best.errors = failures
    best.fit_wall_ms = 1e3 * (time.perf_counter() - start)
    return best


def save_model(mdl, path):
    """Weight dump: a ``#`` header line with the geometry, then row-major weights."""
    if isinstance(mdl, KoModel):
        g, arch, weights = mdl.model.geometry, "ko", mdl.weights_w.reshape(1, -1)
    else:
        g, arch, weights = mdl.geometry, "fc", mdl.m
    header = (
        f"arch={arch},h={g.h},v={g.v},b={g.b},angular_range={g.angular_range!r},"
        f"relu_at_eval={int(mdl.relu_at_eval)},rows={weights.shape[0]},cols={weights.shape[1]}"
    )
    np.savetxt(path, weights, delimiter=",", fmt="%.17g", header=header)


def load_model(path, model=None):
    """Inverse of :func:`save_model`; KO models need (or rebuild) a ForwardModel."""
    from .tomo import Geometry

    with open(path) as fh:
        header = fh.readline().lstrip("#").strip()
    meta = dict(kv.split("=", 1) for kv in header.split(","))
    geom = Geometry(int(meta["h"]), int(meta["v"]), int(meta["b"]), float(meta["angular_range"]))
    weights = np.loadtxt(path, delimiter=",", ndmin=2)
    flag = bool(int(meta["relu_at_eval"]))
    if meta["arch"] == "ko":
        if model is None:
            model = ForwardModel.build(geom)
        return KoModel(weights.reshape(-1), model, flag)
    return FcModel(weights, geom, flag)
