"""Isotropic Gaussian on SO(3): angle density, score, sampling tables.

The rotation angle ``omega`` of an IGSO(3)(sigma) draw has marginal density

    p(omega) = (1 - cos omega) / pi * f(omega)
    f(omega) = sum_l (2l + 1) exp(-l(l+1) sigma^2 / 2) sin((l + 1/2) omega) / sin(omega / 2)

and the score with respect to the rotation (in the tangent space, for a
perturbation with Euler vector ``omega * axis``) is ``d/domega log f * axis``.

For small sigma the series suffers catastrophic cancellation away from
``omega = 0``; there the equivalent image-sum (Poisson dual) form

    f(omega) = exp(t/8) sqrt(2 pi) t^(-3/2) / sin(omega/2)
               * sum_k (-1)^k (omega - 2 pi k) exp(-(omega - 2 pi k)^2 / (2t)),   t = sigma^2

is evaluated in log space instead. Both forms are the same function.
"""

from __future__ import annotations

import hashlib
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSigma, TableBuildError

# Below this sigma the table uses the image-sum form of f.
SERIES_SIGMA_MIN = 0.5
TABLE_VERSION = 1
DEFAULT_TABLE_PARAMS = {"sigma_min": 0.01, "sigma_max": 1.55, "n_sigma": 256, "n_omega": 2048, "l_max": 2000}


def _check_sigma(sigma):
    if not np.all(np.asarray(sigma) > 0):
        raise InvalidSigma(f"sigma must be positive, got {sigma}")


def _series_terms(omega, sigma, ls):
    """Per-term values and omega-derivatives for degrees ``ls`` (broadcast last axis)."""
    w = omega[:, None]
    m = ls[None, :] + 0.5
    coef = (2 * ls + 1) * np.exp(-ls * (ls + 1) * sigma**2 / 2)
    s_half = np.sin(w / 2)
    c_half = np.cos(w / 2)
    small = np.abs(s_half) < 1e-12
    safe = np.where(small, 1.0, s_half)
    chi = np.where(small, 2 * m, np.sin(m * w) / safe)
    dchi = np.where(small, 0.0, (m * np.cos(m * w) * safe - 0.5 * np.sin(m * w) * c_half) / safe**2)
    return coef * chi, coef * dchi


def _series(omega, sigma, l_max, chunk=256):
    omega = np.atleast_1d(np.asarray(omega, float))
    total = np.zeros_like(omega)
    dtotal = np.zeros_like(omega)
    for start in range(0, l_max + 1, chunk):
        ls = np.arange(start, min(start + chunk, l_max + 1), dtype=float)
        t, dt = _series_terms(omega, sigma, ls)
        total += t.sum(axis=1)
        dtotal += dt.sum(axis=1)
        # Stop once the largest possible remaining term is negligible.
        l_next = ls[-1] + 1
        bound = (2 * l_next + 1) ** 2 * np.exp(-l_next * (l_next + 1) * sigma**2 / 2)
        if bound < 1e-16 * np.min(np.abs(total)) or bound == 0.0:
            break
    return total, dtotal


def series_f(omega, sigma, l_max=2000):
    """Truncated IGSO(3) series ``f(omega; sigma)`` (vectorised over ``omega``)."""
    _check_sigma(sigma)
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    omega = np.asarray(omega, float)
    if np.any(omega < 0) or np.any(omega > np.pi + 1e-12):
        raise ValueError("omega must lie in [0, pi]")
    val, _ = _series(omega.reshape(-1), float(sigma), int(l_max))
    return val.reshape(omega.shape) if omega.ndim else float(val[0])


def _image_sum_log_f(omega, sigma, n_images=6):
    """log f and d/domega log f from the image-sum form; valid for omega in (0, pi]."""
    w = np.atleast_1d(np.asarray(omega, float))
    t = float(sigma) ** 2
    ks = np.arange(-n_images, n_images + 1, dtype=float)
    u = w[:, None] - 2 * np.pi * ks[None, :]
    sign = np.where(ks % 2 == 0, 1.0, -1.0)[None, :]
    # Exponents relative to the k = 0 image keep everything O(1).
    rel = np.exp(-(u**2 - w[:, None] ** 2) / (2 * t))
    S = (sign * u * rel).sum(axis=1)
    dS = (sign * rel * (1 - u**2 / t)).sum(axis=1)  # d/dw of sum, without the k=0 factor
    log_c = t / 8 + 0.5 * np.log(2 * np.pi) - 1.5 * np.log(t)
    log_f = log_c - np.log(np.sin(w / 2)) - w**2 / (2 * t) + np.log(S)
    # d/dw [-w^2/2t + log S] with S = e^{w^2/2t} * T and T = sum sign*u*e^{-u^2/2t}
    score = dS / S - 0.5 / np.tan(w / 2)
    return log_f, score


def log_f(omega, sigma, l_max=2000):
    """Numerically stable ``log f(omega; sigma)`` for omega in (0, pi]."""
    _check_sigma(sigma)
    omega = np.asarray(omega, float)
    if sigma < SERIES_SIGMA_MIN:
        out, _ = _image_sum_log_f(omega.reshape(-1), sigma)
    else:
        val, _ = _series(omega.reshape(-1), float(sigma), l_max)
        out = np.log(val)
    return out.reshape(omega.shape) if omega.ndim else float(out[0])


def density_p(omega, sigma, l_max=2000):
    """Marginal density of the rotation angle, ``(1 - cos omega)/pi * f``."""
    omega = np.asarray(omega, float)
    flat = omega.reshape(-1)
    out = np.zeros_like(flat)
    pos = flat > 0
    if pos.any():
        out[pos] = (1 - np.cos(flat[pos])) / np.pi * np.exp(log_f(flat[pos], sigma, l_max))
    return out.reshape(omega.shape) if omega.ndim else float(out[0])


def angle_score(omega, sigma, l_max=2000):
    """``d/domega log f(omega; sigma)``, differentiating the truncated series term by term.

    Uses the image-sum form for sigma below ``SERIES_SIGMA_MIN``.
    """
    _check_sigma(sigma)
    omega = np.asarray(omega, float)
    flat = omega.reshape(-1)
    if np.any(flat <= 0) or np.any(flat > np.pi):
        warnings.warn("angle_score: omega clamped into (0, pi)", RuntimeWarning, stacklevel=2)
        flat = np.clip(flat, 1e-6, np.pi - 1e-6)
    if sigma < SERIES_SIGMA_MIN:
        _, out = _image_sum_log_f(flat, sigma)
    else:
        val, dval = _series(flat, float(sigma), l_max)
        out = dval / val
    return out.reshape(omega.shape) if omega.ndim else float(out[0])


@dataclass(frozen=True)
class IgSo3Table:
    """Precomputed log-density, score and CDF over a (sigma, omega) grid.

    Rows are indexed by ``sigma_grid`` (geometric spacing), columns by
    ``omega_grid`` which excludes 0 and ends at pi. ``cdf`` is normalised so
    that every row ends at exactly 1.
    """

    sigma_grid: np.ndarray
    omega_grid: np.ndarray
    log_f: np.ndarray
    score: np.ndarray
    cdf: np.ndarray
    score_norm_sq: np.ndarray
    l_max: int = 2000

    def __post_init__(self):
        for name in ("sigma_grid", "omega_grid", "log_f", "score", "cdf", "score_norm_sq"):
            getattr(self, name).setflags(write=False)

    # -- lookups -------------------------------------------------------------

    def sigma_index(self, sigma) -> np.ndarray:
        """Nearest row in log-sigma; warns when ``sigma`` is outside the grid."""
        i0, i1, a = self.sigma_bracket(sigma)
        return np.where(a < 0.5, i0, i1)

    def sigma_bracket(self, sigma):
        """Rows bracketing ``sigma`` and the log-sigma weight of the upper one (clamped with a warning)."""
        sigma = np.asarray(sigma, float)
        lo, hi = self.sigma_grid[0], self.sigma_grid[-1]
        if np.any(sigma < lo * (1 - 1e-9)) or np.any(sigma > hi * (1 + 1e-9)):
            warnings.warn("sigma outside IGSO(3) table range; clamped", RuntimeWarning, stacklevel=3)
        ls = np.log(self.sigma_grid)
        step = (ls[-1] - ls[0]) / (len(ls) - 1)
        x = (np.log(np.clip(sigma, lo, hi)) - ls[0]) / step
        i0 = np.clip(np.floor(x).astype(int), 0, len(ls) - 2)
        return i0, i0 + 1, np.clip(x - i0, 0.0, 1.0)

    def _interp_row(self, values, idx, omega):
        w = self.omega_grid
        omega = np.clip(omega, w[0], w[-1])
        j = np.clip(np.searchsorted(w, omega) - 1, 0, len(w) - 2)
        frac = (omega - w[j]) / (w[j + 1] - w[j])
        return values[idx, j] * (1 - frac) + values[idx, j + 1] * frac

    def _interp(self, values, omega, sigma):
        """Cubic Lagrange in log-sigma (linear at the grid ends) of rows interpolated linearly in omega."""
        omega = np.asarray(omega, float)
        i0, _, t = (np.broadcast_to(v, omega.shape) for v in self.sigma_bracket(sigma))
        n = len(self.sigma_grid)
        cubic = (i0 >= 1) & (i0 <= n - 3)
        weights = np.where(cubic, [[-t * (t - 1) * (t - 2) / 6], [(t + 1) * (t - 1) * (t - 2) / 2],
                                   [-(t + 1) * t * (t - 2) / 2], [(t + 1) * t * (t - 1) / 6]],
                           [[np.zeros_like(t)], [1 - t], [t], [np.zeros_like(t)]])[:, 0]
        out = np.zeros_like(omega)
        for k, w in zip(range(-1, 3), weights):
            out = out + w * self._interp_row(values, np.clip(i0 + k, 0, n - 1), omega)
        return out

    def score_at(self, omega, sigma) -> np.ndarray:
        return self._interp(self.score, omega, sigma)

    def density_at(self, omega, sigma) -> np.ndarray:
        omega = np.asarray(omega, float)
        return (1 - np.cos(omega)) / np.pi * np.exp(self._interp(self.log_f, omega, sigma))

    def score_norm_sq_at(self, sigma) -> np.ndarray:
        """E[|score|^2] at ``sigma``, interpolated in log-sigma."""
        i0, i1, a = self.sigma_bracket(sigma)
        return (1 - a) * self.score_norm_sq[i0] + a * self.score_norm_sq[i1]

    def score_norm(self, sigma) -> np.ndarray:
        """sqrt(E[|score|^2]) at ``sigma``."""
        return np.sqrt(self.score_norm_sq_at(sigma))

    def _quantile(self, row, u):
        cdf = np.concatenate([[0.0], self.cdf[row]])
        w = np.concatenate([[0.0], self.omega_grid])
        j = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(w) - 2)
        span = cdf[j + 1] - cdf[j]
        frac = np.where(span > 0, (u - cdf[j]) / np.where(span > 0, span, 1.0), 0.0)
        return w[j] + np.clip(frac, 0.0, 1.0) * (w[j + 1] - w[j])

    def sample_angle(self, sigma, u) -> np.ndarray:
        """Inverse-CDF angle for uniforms ``u``; quantiles of the two bracketing rows are blended in log-sigma."""
        u = np.asarray(u, float)
        i0, i1, a = self.sigma_bracket(float(sigma))
        return (1 - a) * self._quantile(int(i0), u) + a * self._quantile(int(i1), u)

    # -- persistence ---------------------------------------------------------

    def build_params(self) -> dict:
        return {
            "sigma_min": float(self.sigma_grid[0]),
            "sigma_max": float(self.sigma_grid[-1]),
            "n_sigma": len(self.sigma_grid),
            "n_omega": len(self.omega_grid),
            "l_max": int(self.l_max),
        }

    def save(self, path) -> None:
        buf = io.BytesIO()
        np.savez(
            buf,
            version=np.array(TABLE_VERSION),
            sigma_grid=self.sigma_grid,
            omega_grid=self.omega_grid,
            log_f=self.log_f,
            score=self.score,
            cdf=self.cdf,
            score_norm_sq=self.score_norm_sq,
            l_max=np.array(self.l_max),
        )
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "IgSo3Table":
        with np.load(path) as z:
            if int(z["version"]) != TABLE_VERSION:
                raise TableBuildError(f"table cache version {int(z['version'])} != {TABLE_VERSION}")
            return cls(
                z["sigma_grid"].copy(),
                z["omega_grid"].copy(),
                z["log_f"].copy(),
                z["score"].copy(),
                z["cdf"].copy(),
                z["score_norm_sq"].copy(),
                int(z["l_max"]),
            )


def build_table(sigma_min=0.01, sigma_max=1.55, n_sigma=256, n_omega=2048, l_max=2000) -> IgSo3Table:
    """Tabulate log f, score and CDF on a geometric sigma grid and uniform omega grid."""
    if not 0 < sigma_min < sigma_max:
        raise InvalidSigma("need 0 < sigma_min < sigma_max")
    if n_sigma < 64 or n_omega < 64:
        raise TableBuildError("grids must have at least 64 points")
    sigmas = np.exp(np.linspace(np.log(sigma_min), np.log(sigma_max), n_sigma))
    omegas = np.linspace(0.0, np.pi, n_omega + 1)[1:]
    log_fs = np.empty((n_sigma, n_omega))
    scores = np.empty((n_sigma, n_omega))
    for i, s in enumerate(sigmas):
        if s < SERIES_SIGMA_MIN:
            log_fs[i], scores[i] = _image_sum_log_f(omegas, s)
        else:
            val, dval = _series(omegas, s, l_max)
            log_fs[i] = np.log(val)
            scores[i] = dval / val
    if not (np.isfinite(log_fs).all() and np.isfinite(scores).all()):
        raise TableBuildError("non-finite entries in IGSO(3) table")

    pdf = (1 - np.cos(omegas))[None, :] / np.pi * np.exp(log_fs)
    grid = np.concatenate([[0.0], omegas])
    pdf0 = np.concatenate([np.zeros((n_sigma, 1)), pdf], axis=1)
    increments = 0.5 * (pdf0[:, 1:] + pdf0[:, :-1]) * np.diff(grid)[None, :]
    cdf = np.cumsum(increments, axis=1)
    total = cdf[:, -1:]
    cdf = cdf / total
    cdf[:, -1] = 1.0
    if np.any(np.diff(cdf, axis=1) < 0) or np.any(cdf[:, 0] < 0):
        raise TableBuildError("CDF rows are not monotone; refine the omega grid")

    sq = np.concatenate([np.zeros((n_sigma, 1)), pdf * scores**2], axis=1)
    norm_sq = (0.5 * (sq[:, 1:] + sq[:, :-1]) * np.diff(grid)[None, :]).sum(axis=1) / total[:, 0]
    return IgSo3Table(sigmas, omegas, log_fs, scores, cdf, norm_sq, int(l_max))


def table_fingerprint(table: IgSo3Table) -> str:
    h = hashlib.sha256()
    for arr in (table.sigma_grid, table.omega_grid, table.log_f, table.score, table.cdf):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def load_or_build_table(cache_path=None, **params) -> IgSo3Table:
    """Build a table, reusing ``cache_path`` when its build parameters match."""
    if cache_path is not None and Path(cache_path).exists():
        table = IgSo3Table.load(cache_path)
        wanted = {**DEFAULT_TABLE_PARAMS, **params}
        if all(np.isclose(table.build_params()[k], v) for k, v in wanted.items()):
            return table
    table = build_table(**params)
    if cache_path is not None:
        Path(cache_path).parent.mkdir(parents=True, exist_ok=True)
        table.save(cache_path)
    return table


def uniform_axes(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_rotation(table: IgSo3Table, sigma, rng: np.random.Generator, size=None) -> np.ndarray:
    """Euler vector ``omega * axis`` with a uniform axis and ``omega ~ p(omega; sigma)``."""
    n = 1 if size is None else int(size)
    axes = uniform_axes(rng, n)
    omegas = table.sample_angle(sigma, rng.uniform(size=n))
    out = axes * omegas[:, None]
    return out[0] if size is None else out


def rotation_score(table: IgSo3Table, delta_rotation, sigma) -> np.ndarray:
    """Tangent-space score ``(d/domega log f)(|delta|) * delta/|delta|`` (batched over rows)."""
    d = np.asarray(delta_rotation, float)
    flat = d.reshape(-1, 3)
    omega = np.linalg.norm(flat, axis=1)
    out = np.zeros_like(flat)
    nz = omega > 0
    if nz.any():
        sig = np.broadcast_to(np.asarray(sigma, float), omega.shape)[nz]
        s = table.score_at(omega[nz], sig)
        out[nz] = s[:, None] * flat[nz] / omega[nz, None]
    return out.reshape(d.shape)
