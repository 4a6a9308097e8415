"""Exact GP regression over the grid cells.

All training inputs sit on grid cells, so a posterior is determined by the
per-cell count and sum of readings: ``k`` readings of one cell with noise
variance ``s2`` carry the same information as their mean observed with
noise ``s2 / k``. The Gram matrix is therefore built over occupied cells
only, which keeps it at a few hundred rows for a full mission.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .field import MeasurementSet, grid_coords


class GPNumericalError(ArithmeticError):
    """The Gram matrix could not be factorized, or variance went negative."""


@dataclass(frozen=True)
class GPHyperparams:
    """Squared-exponential kernel settings.

    Defaults are not fitted to any dataset; they put the correlation length
    at about three cells and the noise at the sensor's 0.05 std.
    """

    length_scale_cells: float = 3.0
    signal_variance: float = 1.0
    noise_variance: float = 0.05 ** 2
    jitter: float = 1e-8
    prior_mean: float = 0.5

    def __post_init__(self):
        if self.length_scale_cells <= 0 or self.signal_variance <= 0 or self.jitter <= 0:
            raise ValueError("length scale, signal variance and jitter must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")


def se_kernel(xa: np.ndarray, xb: np.ndarray, hp: GPHyperparams) -> np.ndarray:
    d2 = ((xa[:, None, :] - xb[None, :, :]) ** 2).sum(-1)
    return hp.signal_variance * np.exp(-0.5 * d2 / hp.length_scale_cells ** 2)


@functools.lru_cache(maxsize=16)
def prior_covariance(shape: tuple[int, int], length_scale: float, signal_variance: float) -> np.ndarray:
    """Read-only prior covariance between every pair of grid cells."""
    hp = GPHyperparams(length_scale_cells=length_scale, signal_variance=signal_variance)
    xy = grid_coords(shape)
    K = se_kernel(xy, xy, hp)
    K.setflags(write=False)
    return K


class GPPosterior:
    """Posterior over all cells of a grid given a deduplicated MeasurementSet.

    Immutable after construction; predictions are computed lazily and cached.
    Use :func:`fit` and :meth:`extended` rather than the constructor.
    """

    def __init__(self, data: MeasurementSet, hp: GPHyperparams, shape: tuple[int, int],
                 _sums: np.ndarray | None = None, _counts: np.ndarray | None = None):
        self.data = data
        self.hp = hp
        self.shape = (int(shape[0]), int(shape[1]))
        n = self.shape[0] * self.shape[1]
        if _sums is None:
            _sums = np.bincount(data.cells, weights=data.values, minlength=n)
            _counts = np.bincount(data.cells, minlength=n)
        self._sums = _sums
        self._counts = _counts
        self._K = prior_covariance(self.shape, hp.length_scale_cells, hp.signal_variance)
        self.cache: dict = {}
        self._factorize()

    @property
    def n_cells(self) -> int:
        return self.shape[0] * self.shape[1]

    def _factorize(self):
        occupied = np.flatnonzero(self._counts)
        self._occupied = occupied
        if len(occupied) == 0:
            self._chol = None
            self._alpha = np.zeros(0)
            return
        counts = self._counts[occupied]
        ybar = self._sums[occupied] / counts
        base = self._K[np.ix_(occupied, occupied)]
        jitter = self.hp.jitter
        for _ in range(4):
            gram = base.copy()
            gram[np.diag_indices_from(gram)] += (self.hp.noise_variance + jitter) / counts
            try:
                chol = linalg.cholesky(gram, lower=True, check_finite=False)
                break
            except linalg.LinAlgError:
                jitter *= 10
        else:
            cond = np.linalg.cond(base)
            raise GPNumericalError(
                f"Gram matrix of {len(occupied)} cells not positive definite after jitter "
                f"{jitter:g}; condition number {cond:.3g}")
        self._chol = chol
        self._alpha = linalg.cho_solve((chol, True), ybar - self.hp.prior_mean, check_finite=False)

    def mean(self) -> np.ndarray:
        """Posterior mean at every cell (flat order). Read-only, cached."""
        mu = self.cache.get("mean")
        if mu is None:
            if self._chol is None:
                mu = np.full(self.n_cells, self.hp.prior_mean)
            else:
                mu = self.hp.prior_mean + self._K[:, self._occupied] @ self._alpha
            mu.setflags(write=False)
            self.cache["mean"] = mu
        return mu

    def variance(self, cells=None) -> np.ndarray:
        """Posterior variance of the latent field at ``cells`` (default: all)."""
        if cells is None:
            cached = self.cache.get("variance")
            if cached is not None:
                return cached
            idx = np.arange(self.n_cells)
        else:
            idx = np.asarray(cells, dtype=np.int64)
        prior = np.full(len(idx), self.hp.signal_variance)
        if self._chol is None:
            var = prior
        else:
            v = linalg.solve_triangular(self._chol, self._K[np.ix_(self._occupied, idx)],
                                        lower=True, check_finite=False)
            var = prior - np.einsum("ij,ij->j", v, v)
        if var.size and var.min() < -1e-9:
            raise GPNumericalError(f"negative posterior variance {var.min():.3g}")
        var = np.maximum(var, 0.0)
        if cells is None:
            var.setflags(write=False)
            self.cache["variance"] = var
        return var

    def extended(self, extra: MeasurementSet) -> "GPPosterior":
        """Posterior conditioned on the training data plus ``extra``.

        Readings already present (same provenance key) are ignored; if nothing
        new remains the same object is returned.
        """
        new = self.data.new_from(extra)
        if len(new) == 0:
            return self
        n = self.n_cells
        sums = self._sums + np.bincount(new.cells, weights=new.values, minlength=n)
        counts = self._counts + np.bincount(new.cells, minlength=n)
        data = MeasurementSet(
            np.concatenate([self.data.cells, new.cells]),
            np.concatenate([self.data.values, new.values]),
            np.concatenate([self.data.robots, new.robots]),
            np.concatenate([self.data.steps, new.steps]),
        )
        return GPPosterior(data, self.hp, self.shape, sums, counts)


def fit(data: MeasurementSet, hp: GPHyperparams, shape: tuple[int, int]) -> GPPosterior:
    """Condition the prior on ``data`` (deduplicated by provenance key)."""
    return GPPosterior(data.unique(), hp, shape)


def predict_mean(gp: GPPosterior) -> np.ndarray:
    return gp.mean()


def predict_var(gp: GPPosterior, cells=None) -> np.ndarray:
    return gp.variance(cells)
