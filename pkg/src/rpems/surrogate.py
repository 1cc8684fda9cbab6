"""Ordinary Kriging digital twin of the meta-atom response.

Inputs are the 8 free descriptor entries plus the binary state, mapped to the
unit box.  Outputs are the real and imaginary parts of the reflection and
susceptibility tensors (20 reals).  Each distinct non-constant output column
gets its own anisotropic squared-exponential model with length-scales picked
by leave-one-out error over a logarithmic grid.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.stats import qmc

from . import atom

MAGIC = b"RPEMSKRG"
FORMAT_VERSION = 1

OUTPUT_NAMES = [
    f"{name}.{part}"
    for name in ("gamma_pp", "gamma_ll", "gamma_pl", "gamma_lp",
                 "ke_xx", "ke_yy", "ke_zz", "kh_xx", "kh_yy", "kh_zz")
    for part in ("re", "im")
]
N_OUT = len(OUTPUT_NAMES)
N_IN = len(atom.FREE) + 1

NUGGET_DEFAULT = 1e-10
NUGGET_MAX = 1e-4
LENGTH_GRID = np.logspace(-1.5, 1.5, 13)
# Smallest reciprocal condition number accepted for the final fit; keeps
# the interpolation residual near machine precision.
RCOND_MIN = 1e-13
SHRINK = 0.8


class KrigingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# training data


def response_vector(gamma: atom.ReflectionTensor, k: atom.SusceptibilityTensor) -> np.ndarray:
    z = np.concatenate([gamma.as_array(), k.as_array()])
    return np.column_stack([z.real, z.imag]).ravel()


def split_response(y) -> tuple[atom.ReflectionTensor, atom.SusceptibilityTensor]:
    y = np.asarray(y, dtype=float)
    z = y[0::2] + 1j * y[1::2]
    return atom.ReflectionTensor(*z[:4]), atom.SusceptibilityTensor(*z[4:])


@dataclass(eq=False)
class TrainingSet:
    g: np.ndarray  # (V, 16)
    s: np.ndarray  # (V,)
    y: np.ndarray  # (V, 20)
    lo: np.ndarray  # (8,) box of the free entries
    hi: np.ndarray
    f0: float

    def __post_init__(self):
        self.g = np.atleast_2d(np.asarray(self.g, dtype=float))
        self.s = np.asarray(self.s, dtype=int).ravel()
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        v = len(self.g)
        if v < 2:
            raise ValueError("training set needs at least 2 samples")
        if self.s.shape != (v,) or self.y.shape != (v, N_OUT):
            raise ValueError("training arrays have inconsistent shapes")
        x = self.inputs()
        if len(np.unique(x, axis=0)) != v:
            raise ValueError("duplicate (g, s) inputs in the training set")

    def __len__(self) -> int:
        return len(self.g)

    def inputs(self) -> np.ndarray:
        return to_unit(self.g, self.s, self.lo, self.hi)

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.g[idx], self.s[idx], self.y[idx], self.lo, self.hi, self.f0)


def to_unit(g, s, lo, hi) -> np.ndarray:
    g = np.atleast_2d(np.asarray(g, dtype=float))
    free = g[:, atom.FREE]
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.column_stack([(free - lo) / span, np.asarray(s, dtype=float).reshape(-1)])


def oracle_training_set(n: int, center=None, rel_box: float = 0.05, rng=0, wave=None,
                        f0: float = atom.F0_DESIGN) -> TrainingSet:
    """``n`` oracle evaluations on a Latin hypercube over ``center * (1 -+ rel_box)``.

    States alternate 0/1 along the sample order.
    """
    from .scenario import IncidentWave

    center = atom.NOMINAL_G if center is None else np.asarray(center, dtype=float)
    wave = wave or IncidentWave(0.0, 0.0, 1.0, 1.0, f0)
    lo = center[atom.FREE] * (1.0 - rel_box)
    hi = center[atom.FREE] * (1.0 + rel_box)
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2**31 - 1))
    u = qmc.LatinHypercube(d=len(atom.FREE), seed=seed).random(n)
    g = atom.expand_free(lo + u * (hi - lo))
    s = np.arange(n) % 2
    y = np.empty((n, N_OUT))
    for i in range(n):
        gam = atom.oracle_reflection(g[i], int(s[i]), f0)
        y[i] = response_vector(gam, atom.gamma_to_susceptibility(gam, wave))
    return TrainingSet(g, s, y, lo, hi, f0)


# --------------------------------------------------------------------------
# single-output ordinary kriging


def _corr(xa, xb, theta):
    d = (xa[:, None, :] - xb[None, :, :]) * theta
    return np.exp(-np.einsum("ijk,ijk->ij", d, d))


def _factor(r, nugget):
    """Cholesky of ``r + nugget I``, escalating the nugget on failure."""
    nug = nugget
    while True:
        try:
            c = linalg.cho_factor(r + nug * np.eye(len(r)), lower=True, check_finite=False)
            if np.all(np.isfinite(c[0])):
                return c, nug
        except linalg.LinAlgError:
            pass
        nug = NUGGET_DEFAULT if nug <= 0 else nug * 10.0
        if nug > NUGGET_MAX * (1 + 1e-9):
            raise KrigingError("correlation matrix singular even at the maximum nugget")


def _sq_diffs(x) -> np.ndarray:
    """Per-dimension squared differences, shape ``(n*n, d)``."""
    d = x[:, None, :] - x[None, :, :]
    return (d * d).reshape(-1, x.shape[1])


def _loo_error(d2, y, theta, nugget) -> float:
    """Mean squared leave-one-out residual of ordinary Kriging.

    ``d2`` comes from :func:`_sq_diffs`.  With
    ``Q = R^-1 - R^-1 1 1^T R^-1 / (1^T R^-1 1)`` the residual at sample i
    is ``(Q y)_i / Q_ii``.
    """
    n = len(y)
    try:
        c, _ = _factor(np.exp(-(d2 @ (theta * theta))).reshape(n, n), nugget)
    except KrigingError:
        return np.inf
    linv, info = linalg.lapack.dtrtri(c[0], lower=1)
    if info != 0:
        return np.inf
    linv = np.tril(linv)
    ones = np.ones(len(y))
    r1 = linv.T @ (linv @ ones)
    ry = linv.T @ (linv @ y)
    diag = np.einsum("ij,ij->j", linv, linv) - r1**2 / (ones @ r1)
    res = (ry - r1 * (r1 @ y) / (ones @ r1)) / diag
    return float(np.mean(res**2))


def _select_lengths(x, y, nugget, grid=LENGTH_GRID, passes: int = 2) -> np.ndarray:
    """Isotropic grid search, then coordinate-wise refinement."""
    dim = x.shape[1]
    d2 = _sq_diffs(x)
    errs = [_loo_error(d2, y, np.full(dim, 1.0 / l), nugget) for l in grid]
    best = np.full(dim, grid[int(np.argmin(errs))])
    best_err = min(errs)
    for _ in range(passes):
        changed = False
        for d in range(dim):
            for l in grid:
                if l == best[d]:
                    continue
                trial = best.copy()
                trial[d] = l
                e = _loo_error(d2, y, 1.0 / trial, nugget)
                if e < best_err * (1 - 1e-9):
                    best, best_err, changed = trial, e, True
        if not changed:
            break
    return best


@dataclass(eq=False)
class _OutputModel:
    lengths: np.ndarray
    nugget: float
    mu: float
    sigma2: float
    weights: np.ndarray
    chol: np.ndarray
    r1: np.ndarray  # R^-1 1
    one_r1: float  # 1^T R^-1 1

    @classmethod
    def fit(cls, x, y, lengths, nugget, rcond_min: float = RCOND_MIN):
        """Fit with the given length-scales, shrinking them while the
        correlation matrix is too ill-conditioned."""
        lengths = np.asarray(lengths, float)
        while True:
            r = _corr(x, x, 1.0 / lengths)
            c, nug = _factor(r, nugget)
            rc, _ = linalg.lapack.dpocon(c[0], np.abs(r).sum(axis=0).max() + nug, uplo="L")
            if rc >= rcond_min or np.all(lengths < 1e-3):
                break
            lengths = lengths * SHRINK
        ones = np.ones(len(y))
        r1 = linalg.cho_solve(c, ones, check_finite=False)
        one_r1 = float(ones @ r1)
        mu = float(r1 @ y / one_r1)
        w = linalg.cho_solve(c, y - mu, check_finite=False)
        sigma2 = max(float((y - mu) @ w) / len(y), 0.0)
        return cls(np.asarray(lengths, float), nug, mu, sigma2, w, np.tril(c[0]), r1, one_r1)

    def predict(self, xtrain, xq):
        r = _corr(xq, xtrain, 1.0 / self.lengths)  # (Q, V)
        mean = self.mu + r @ self.weights
        rinv_r = linalg.cho_solve((self.chol, True), r.T, check_finite=False)  # (V, Q)
        quad = np.einsum("vq,vq->q", r.T, rinv_r)
        u = 1.0 - self.r1 @ r.T
        var = self.sigma2 * (1.0 - quad + u**2 / self.one_r1)
        return mean, np.maximum(var, 0.0)


class KrigingModel:
    """Bundle of per-output ordinary Kriging predictors."""

    def __init__(self, x, lo, hi, f0, constants, groups, models):
        self.x = x
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        self.f0 = float(f0)
        self.constants = constants  # {output index: value}
        self.groups = groups  # list of lists of output indices sharing a model
        self.models = models  # one _OutputModel per group

    @property
    def n_train(self) -> int:
        return len(self.x)

    def in_box(self, g) -> bool:
        u = to_unit(g, [0], self.lo, self.hi)[0, :-1]
        return bool(np.all(u >= -1e-12) and np.all(u <= 1 + 1e-12))

    def predict(self, g, s) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance of the 20 outputs at one input (or a batch)."""
        g = np.atleast_2d(np.asarray(g, float))
        s = np.broadcast_to(np.asarray(s), (len(g),))
        xq = to_unit(g, s, self.lo, self.hi)
        mean = np.zeros((len(g), N_OUT))
        var = np.zeros((len(g), N_OUT))
        for j, v in self.constants.items():
            mean[:, j] = v
        for cols, m in zip(self.groups, self.models):
            mu, va = m.predict(self.x, xq)
            mean[:, cols] = mu[:, None]
            var[:, cols] = va[:, None]
        if mean.shape[0] == 1:
            return mean[0], var[0]
        return mean, var

    # ---- persistence
    def save(self, path) -> None:
        header = {
            "format": "rpems-kriging",
            "version": FORMAT_VERSION,
            "n_train": self.n_train,
            "n_in": N_IN,
            "outputs": OUTPUT_NAMES,
            "f0": self.f0,
            "constants": {str(k): v for k, v in self.constants.items()},
            "groups": self.groups,
            "hyper": [
                {"lengths": m.lengths.tolist(), "nugget": m.nugget, "mu": m.mu, "sigma2": m.sigma2,
                 "one_r1": m.one_r1}
                for m in self.models
            ],
        }
        arrays = {"x": self.x, "lo": self.lo, "hi": self.hi}
        for i, m in enumerate(self.models):
            arrays[f"w{i}"] = m.weights
            arrays[f"chol{i}"] = m.chol
            arrays[f"r1_{i}"] = m.r1
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
            fh.write(hb)
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "KrigingModel":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[: len(MAGIC)] != MAGIC:
            raise KrigingError(f"{path}: not a Kriging model file")
        off = len(MAGIC)
        version, hlen = struct.unpack("<II", data[off : off + 8])
        if version != FORMAT_VERSION:
            raise KrigingError(f"{path}: unsupported model version {version}")
        off += 8
        header = json.loads(data[off : off + hlen])
        arr = np.load(io.BytesIO(data[off + hlen :]))
        models = []
        for i, h in enumerate(header["hyper"]):
            models.append(
                _OutputModel(np.array(h["lengths"]), h["nugget"], h["mu"], h["sigma2"],
                             arr[f"w{i}"], arr[f"chol{i}"], arr[f"r1_{i}"], h["one_r1"])
            )
        consts = {int(k): v for k, v in header["constants"].items()}
        return cls(arr["x"], arr["lo"], arr["hi"], header["f0"], consts, header["groups"], models)

    def header(self) -> dict:
        return {
            "n_train": self.n_train,
            "groups": [[OUTPUT_NAMES[c] for c in g] for g in self.groups],
            "lengths": [m.lengths.tolist() for m in self.models],
            "nuggets": [m.nugget for m in self.models],
        }


def train(ts: TrainingSet, nugget: float = NUGGET_DEFAULT, lengths=None, select_size: int = 400,
          grid=LENGTH_GRID) -> KrigingModel:
    """Fit one ordinary Kriging predictor per distinct output column.

    ``lengths`` (scalar or per-dimension, in unit-box coordinates) skips
    the leave-one-out search.  The search runs on the first ``select_size``
    samples; the final fit uses all of them.
    """
    x = ts.inputs()
    y = ts.y
    constants, groups = {}, []
    for j in range(N_OUT):
        col = y[:, j]
        if np.all(col == col[0]):
            constants[j] = float(col[0])
            continue
        for grp in groups:
            if np.array_equal(y[:, grp[0]], col):
                grp.append(j)
                break
        else:
            groups.append([j])
    models = []
    sub = slice(0, min(select_size, len(x)))
    for grp in groups:
        col = y[:, grp[0]]
        if lengths is None:
            ls = _select_lengths(x[sub], col[sub], nugget, grid)
        else:
            ls = np.broadcast_to(np.asarray(lengths, float), (x.shape[1],)).copy()
        models.append(_OutputModel.fit(x, col, ls, nugget))
    return KrigingModel(x, ts.lo, ts.hi, ts.f0, constants, groups, models)


def cross_validate(ts: TrainingSet, k: int = 5, seed: int = 0, **train_kw) -> dict:
    """k-fold RMSE per output; folds drawn from a seeded permutation."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > len(ts):
        raise ValueError("more folds than training samples")
    perm = np.random.default_rng(seed).permutation(len(ts))
    folds = np.array_split(perm, k)
    sq = np.zeros(N_OUT)
    for f in folds:
        rest = np.setdiff1d(perm, f)
        model = train(ts.subset(np.sort(rest)), **train_kw)
        pred, _ = model.predict(ts.g[f], ts.s[f])
        sq += np.sum((np.atleast_2d(pred) - ts.y[f]) ** 2, axis=0)
    rmse = np.sqrt(sq / len(ts))
    return {name: float(v) for name, v in zip(OUTPUT_NAMES, rmse)}


class KrigingTwin:
    """Digital twin backed by a trained :class:`KrigingModel`."""

    kind = "kriging"

    def __init__(self, model: KrigingModel):
        self.model = model
        self.f0 = model.f0

    def reflection(self, g, s: int) -> atom.ReflectionTensor:
        return split_response(self.model.predict(g, s)[0])[0]

    def susceptibility(self, g, s: int, wave=None) -> atom.SusceptibilityTensor:
        return split_response(self.model.predict(g, s)[0])[1]
