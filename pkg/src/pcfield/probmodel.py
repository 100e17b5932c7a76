"""Constrained two-component Gaussian mixture over correspondence error.

The error of a correspondence is modeled as a mixture of two isotropic 2D
Gaussians sharing a mean: a tight inlier component (variance capped at
delta_plus) and a wide outlier component (variance at least delta_plus +
margin, below delta_minus). The separation gap keeps the components
identifiable, and the probability mass the mixture puts inside a disk of
radius radius_r around the mean has a closed form used as the confidence of
the correspondence.

Raw parameters live in an unconstrained space and are mapped through
sigmoids (`constrain`), so plain gradient descent can fit the mixture while
every iterate satisfies the constraint chain

    0 <= sigma_plus_sq <= delta_plus < delta_plus + margin
      <= sigma_minus_sq < delta_minus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimMismatch,
    EmptySamples,
    NonFinite,
    NonPositiveVariance,
)
from ._io import save_gray8_png
from .flowfield import FlowField, ScalarField, sample_bilinear
from .geometry import Point2, read_cfld, write_cfld

LOG_FLOOR = math.log(1e-300)

DEFAULT_GAMMA = 0.03
MIN_PATCH_SAMPLES = 8


@dataclass(frozen=True)
class GmmConstraints:
    """Constraint constants of the mixture.

    delta_plus bounds the inlier variance, delta_minus bounds the outlier
    variance from above, margin separates the two, and radius_r is the disk
    radius used by the confidence mass.
    """

    delta_plus: float = 1.0
    delta_minus: float = 11.0
    margin: float = 2.0
    radius_r: float = 1.0

    def __post_init__(self) -> None:
        if not (self.delta_plus > 0.0 and self.margin > 0.0 and self.radius_r > 0.0):
            raise ValueError("delta_plus, margin, radius_r must be positive")
        if not self.delta_minus > self.delta_plus + self.margin:
            raise ValueError("need delta_minus > delta_plus + margin")

    def check(self, params: "GmmParams") -> bool:
        """True when params satisfy the full constraint chain."""
        return bool(
            0.0 <= params.alpha_plus <= 1.0
            and 0.0 <= params.sigma_plus_sq <= self.delta_plus
            and self.delta_plus + self.margin <= params.sigma_minus_sq < self.delta_minus
        )


@dataclass(frozen=True)
class GmmParams:
    """Mixture parameters: inlier weight and the two variances."""

    alpha_plus: float
    sigma_plus_sq: float
    sigma_minus_sq: float


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.05
    iterations: int = 5000

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0 or self.iterations < 0:
            raise ValueError("learning_rate must be positive, iterations non-negative")


@dataclass
class GmmParamField:
    """Per-patch mixture parameters over a field.

    Parameter grids have the patch-grid shape. patch_valid marks patches that
    had enough valid residuals to fit; the rest hold placeholder parameters.
    """

    patch_size: int
    width: int
    height: int
    alpha_plus: np.ndarray
    sigma_plus_sq: np.ndarray
    sigma_minus_sq: np.ndarray
    patch_valid: np.ndarray


@dataclass
class ConfidenceField:
    """Per-pixel confidence in [0, 1]."""

    width: int
    height: int
    m: np.ndarray

    def __post_init__(self) -> None:
        self.m = np.asarray(self.m, dtype=np.float64)
        if self.m.shape != (self.height, self.width):
            raise DimMismatch(f"m must be {(self.height, self.width)}, got {self.m.shape}")
        if self.m.size and (self.m.min() < 0.0 or self.m.max() > 1.0):
            raise ValueError("confidence values must lie in [0, 1]")


def _sigmoid(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    pos = t >= 0
    et = np.exp(np.where(pos, 0.0, t))
    return np.where(pos, 1.0 / (1.0 + np.exp(-np.where(pos, t, 0.0))), et / (1.0 + et))


def _constrain_arrays(
    raw_a: np.ndarray, raw_sp: np.ndarray, raw_sm: np.ndarray, c: GmmConstraints
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    alpha = _sigmoid(raw_a)
    sp = c.delta_plus * _sigmoid(raw_sp)
    lo = c.delta_plus + c.margin
    # the wide variance must stay strictly below delta_minus even when the
    # sigmoid saturates to 1.0 in float arithmetic
    sm = lo + (c.delta_minus - lo) * np.minimum(_sigmoid(raw_sm), 1.0 - 1e-9)
    return alpha, sp, sm


def constrain(
    raw_a: float, raw_sp: float, raw_sm: float, c: GmmConstraints | None = None
) -> GmmParams:
    """Map unconstrained raw values onto the feasible parameter set.

    alpha_plus = sigmoid(raw_a), sigma_plus_sq = delta_plus * sigmoid(raw_sp),
    sigma_minus_sq = (delta_plus + margin) + (delta_minus - delta_plus -
    margin) * sigmoid(raw_sm). All-zero raws give the chain midpoint.
    Saturated raws stay strictly inside the open ends of the chain.
    """
    if c is None:
        c = GmmConstraints()
    alpha, sp, sm = _constrain_arrays(
        np.asarray(raw_a, dtype=np.float64),
        np.asarray(raw_sp, dtype=np.float64),
        np.asarray(raw_sm, dtype=np.float64),
        c,
    )
    return GmmParams(float(alpha), float(sp), float(sm))


def gaussian2d(x, mu, sigma_sq: float) -> np.ndarray | float:
    """Isotropic 2D Gaussian density at x with mean mu.

    x and mu are (..., 2) arrays or Point2; broadcasting applies.
    """
    if sigma_sq <= 0.0:
        raise NonPositiveVariance(f"sigma_sq must be positive, got {sigma_sq}")
    xa = x.as_array() if isinstance(x, Point2) else np.asarray(x, dtype=np.float64)
    ma = mu.as_array() if isinstance(mu, Point2) else np.asarray(mu, dtype=np.float64)
    r2 = np.sum((xa - ma) ** 2, axis=-1)
    val = np.exp(-r2 / (2.0 * sigma_sq)) / (2.0 * math.pi * sigma_sq)
    return float(val) if np.ndim(val) == 0 else val


def gmm_pdf(x, mu, params: GmmParams) -> np.ndarray | float:
    """Mixture density alpha * N(mu, sigma_plus_sq) + (1-alpha) * N(mu, sigma_minus_sq)."""
    a = params.alpha_plus
    return a * gaussian2d(x, mu, params.sigma_plus_sq) + (1.0 - a) * gaussian2d(
        x, mu, params.sigma_minus_sq
    )


def confidence(params: GmmParams, radius_r: float = 1.0) -> float:
    """Probability mass the mixture puts inside the disk of radius radius_r.

    Closed form: each isotropic component integrates to 1 - exp(-R^2 /
    (2 sigma^2)) over the disk, so the mixture mass is

        1 - E_minus + alpha * (E_minus - E_plus),
        E = exp(-R^2 / (2 sigma^2)),

    with the sigma_plus_sq -> 0 limit E_plus = 0. Lies in [0, 1]; increasing
    in alpha and radius, decreasing in either variance.
    """
    return float(
        _confidence_arrays(
            np.asarray(params.alpha_plus),
            np.asarray(params.sigma_plus_sq),
            np.asarray(params.sigma_minus_sq),
            radius_r,
        )
    )


def _confidence_arrays(
    alpha: np.ndarray, sp: np.ndarray, sm: np.ndarray, radius_r: float
) -> np.ndarray:
    if radius_r <= 0.0:
        raise ValueError(f"radius_r must be positive, got {radius_r}")
    r2 = radius_r * radius_r
    with np.errstate(divide="ignore"):
        e_plus = np.where(sp > 0.0, np.exp(-r2 / (2.0 * np.where(sp > 0.0, sp, 1.0))), 0.0)
    e_minus = np.exp(-r2 / (2.0 * sm))
    return 1.0 - e_minus + alpha * (e_minus - e_plus)


def distance_map(width: int, height: int, origin: Point2, gamma: float = DEFAULT_GAMMA) -> ScalarField:
    """Radial falloff exp(-gamma / d) around the origin, 0 at the origin itself.

    Monotonically increasing in the distance d, approaching 1 far away.
    """
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    d = np.hypot(xs - origin.x, ys - origin.y)
    with np.errstate(divide="ignore"):
        vals = np.where(d > 0.0, np.exp(-gamma / np.where(d > 0.0, d, 1.0)), 0.0)
    return ScalarField(width, height, vals)


def _log_mixture(
    r2: np.ndarray, alpha: np.ndarray, sp: np.ndarray, sm: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log density of the mixture at squared distances r2, plus both
    component log-terms (needed for responsibilities). Shapes broadcast."""
    with np.errstate(divide="ignore"):
        t_plus = np.log(alpha) - np.log(2.0 * math.pi * sp) - r2 / (2.0 * sp)
        t_minus = np.log1p(-alpha) - np.log(2.0 * math.pi * sm) - r2 / (2.0 * sm)
    return np.logaddexp(t_plus, t_minus), t_plus, t_minus


def nll(x, mu, params: GmmParams) -> float:
    """Mean negative log likelihood of samples under the mixture.

    x, mu: (N, 2) arrays (or Point2 sequences). The log is floored at
    log(1e-300), so the value is finite for any valid parameters.
    """
    xa = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    ma = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
    if xa.shape[0] == 0:
        raise EmptySamples("nll needs at least one sample")
    if xa.shape != ma.shape:
        raise DimMismatch(f"x has shape {xa.shape}, mu has shape {ma.shape}")
    if params.sigma_plus_sq <= 0.0 or params.sigma_minus_sq <= 0.0:
        raise NonPositiveVariance("nll needs positive variances")
    r2 = np.sum((xa - ma) ** 2, axis=-1)
    logp, _, _ = _log_mixture(
        r2,
        np.asarray(params.alpha_plus, dtype=np.float64),
        np.asarray(params.sigma_plus_sq, dtype=np.float64),
        np.asarray(params.sigma_minus_sq, dtype=np.float64),
    )
    return float(-np.mean(np.maximum(logp, LOG_FLOOR)))


def nll_gradient(
    x, mu, raw: tuple[float, float, float], c: GmmConstraints
) -> tuple[float, np.ndarray]:
    """NLL and its analytic gradient with respect to the raw parameters.

    Returns (value, gradient) where gradient is d nll / d (raw_a, raw_sp,
    raw_sm) evaluated through `constrain`. Where the log floor binds the
    gradient contribution is 0, matching finite differences of `nll`.
    """
    xa = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    ma = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
    if xa.shape[0] == 0:
        raise EmptySamples("nll_gradient needs at least one sample")
    r2 = np.sum((xa - ma) ** 2, axis=-1)[None, :]
    ra = np.array([raw[0]], dtype=np.float64)
    rsp = np.array([raw[1]], dtype=np.float64)
    rsm = np.array([raw[2]], dtype=np.float64)
    value, grads = _nll_and_grads(r2, None, ra, rsp, rsm, c)
    return float(value[0]), np.array([grads[0][0], grads[1][0], grads[2][0]])


def _nll_and_grads(
    r2: np.ndarray,
    mask: np.ndarray | None,
    raw_a: np.ndarray,
    raw_sp: np.ndarray,
    raw_sm: np.ndarray,
    c: GmmConstraints,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Batched NLL and raw-space gradients.

    r2: (P, S) squared distances, mask: (P, S) sample mask or None for all.
    Returns nll (P,) and gradient arrays (P,) per raw parameter.
    """
    alpha, sp, sm = _constrain_arrays(raw_a, raw_sp, raw_sm, c)
    al = alpha[:, None]
    spl = sp[:, None]
    sml = sm[:, None]
    logp, t_plus, t_minus = _log_mixture(r2, al, spl, sml)
    live = logp >= LOG_FLOOR
    if mask is not None:
        counts = mask.sum(axis=1).astype(np.float64)
        use = mask
    else:
        counts = np.full(r2.shape[0], r2.shape[1], dtype=np.float64)
        use = np.ones_like(live)
    nll_vec = -(np.where(use, np.maximum(logp, LOG_FLOOR), 0.0).sum(axis=1)) / counts
    # Responsibilities; zero where the floor binds (gradient of a constant).
    contrib = use & live
    rho_plus = np.where(contrib, np.exp(t_plus - logp), 0.0)
    rho_minus = np.where(contrib, np.exp(t_minus - logp), 0.0)
    d_ra = rho_plus * (1.0 - al) - rho_minus * al
    d_rsp = rho_plus * (r2 - 2.0 * spl) * (1.0 - spl / c.delta_plus) / (2.0 * spl)
    lo = c.delta_plus + c.margin
    dsm = (sml - lo) * (c.delta_minus - sml) / (c.delta_minus - lo)
    d_rsm = rho_minus * (r2 - 2.0 * sml) / (2.0 * sml * sml) * dsm
    g_a = -d_ra.sum(axis=1) / counts
    g_sp = -d_rsp.sum(axis=1) / counts
    g_sm = -d_rsm.sum(axis=1) / counts
    return nll_vec, (g_a, g_sp, g_sm)


def _fit_raw_batch(
    r2: np.ndarray, mask: np.ndarray | None, c: GmmConstraints, opt: OptimizerConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradient descent on raw parameters for a batch of sample sets.

    All rows start at raw = 0 and take opt.iterations fixed steps. The
    lowest-NLL iterate per row is returned, so the result never exceeds the
    initial NLL. Returns (raw_a, raw_sp, raw_sm, best_nll, ok) where ok is
    False for rows that produced a non-finite loss or gradient.
    """
    p = r2.shape[0]
    ra = np.zeros(p)
    rsp = np.zeros(p)
    rsm = np.zeros(p)
    best = np.full(p, np.inf)
    best_raw = (ra.copy(), rsp.copy(), rsm.copy())
    ok = np.ones(p, dtype=bool)
    for it in range(opt.iterations + 1):
        nll_vec, grads = _nll_and_grads(r2, mask, ra, rsp, rsm, c)
        finite = np.isfinite(nll_vec)
        ok &= finite
        better = finite & (nll_vec < best)
        best = np.where(better, nll_vec, best)
        for cur, kept in zip((ra, rsp, rsm), best_raw):
            kept[better] = cur[better]
        if it == opt.iterations:
            break
        g_a, g_sp, g_sm = grads
        ok &= np.isfinite(g_a) & np.isfinite(g_sp) & np.isfinite(g_sm)
        step = opt.learning_rate
        ra = ra - step * np.where(np.isfinite(g_a), g_a, 0.0)
        rsp = rsp - step * np.where(np.isfinite(g_sp), g_sp, 0.0)
        rsm = rsm - step * np.where(np.isfinite(g_sm), g_sm, 0.0)
    return best_raw[0], best_raw[1], best_raw[2], best, ok


def fit_params(
    x, mu, c: GmmConstraints | None = None, opt: OptimizerConfig | None = None
) -> GmmParams:
    """Fit the constrained mixture to samples by gradient descent.

    Deterministic: raw parameters start at 0 and take opt.iterations fixed
    steps of size opt.learning_rate along the analytic gradient; the best
    iterate is returned, so its NLL never exceeds the raw = 0 starting point.
    Needs at least 8 samples. Raises NonFinite if the loss or gradient
    diverges.
    """
    c = c or GmmConstraints()
    opt = opt or OptimizerConfig()
    xa = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    ma = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
    if xa.shape[0] < MIN_PATCH_SAMPLES:
        raise EmptySamples(f"fit_params needs >= {MIN_PATCH_SAMPLES} samples, got {xa.shape[0]}")
    if xa.shape != ma.shape:
        raise DimMismatch(f"x has shape {xa.shape}, mu has shape {ma.shape}")
    r2 = np.sum((xa - ma) ** 2, axis=-1)[None, :]
    ra, rsp, rsm, _, ok = _fit_raw_batch(r2, None, c, opt)
    if not bool(ok[0]):
        raise NonFinite("optimization produced a non-finite loss or gradient")
    return constrain(float(ra[0]), float(rsp[0]), float(rsm[0]), c)


def _patch_residuals(
    flow_fwd: FlowField, flow_bwd: FlowField, patch_size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[int, int]]:
    """Forward-backward residual squared distances grouped per patch.

    Returns (r2 (P, S), mask (P, S), pixel_valid (H, W), (ph, pw)).
    """
    h, w = flow_fwd.height, flow_fwd.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xs + flow_fwd.u
    sy = ys + flow_fwd.v
    (bu, bv), ok_b = sample_bilinear([flow_bwd.u, flow_bwd.v], flow_bwd.valid, sx, sy)
    res_x = np.where(ok_b, sx + bu - xs, 0.0)
    res_y = np.where(ok_b, sy + bv - ys, 0.0)
    pixel_valid = flow_fwd.valid & ok_b
    r2 = res_x * res_x + res_y * res_y
    ph = -(-h // patch_size)
    pw = -(-w // patch_size)
    padded_r2 = np.zeros((ph * patch_size, pw * patch_size))
    padded_r2[:h, :w] = np.where(pixel_valid, r2, 0.0)
    padded_ok = np.zeros((ph * patch_size, pw * patch_size), dtype=bool)
    padded_ok[:h, :w] = pixel_valid
    tiles_r2 = padded_r2.reshape(ph, patch_size, pw, patch_size).transpose(0, 2, 1, 3)
    tiles_ok = padded_ok.reshape(ph, patch_size, pw, patch_size).transpose(0, 2, 1, 3)
    s = patch_size * patch_size
    return tiles_r2.reshape(-1, s), tiles_ok.reshape(-1, s), pixel_valid, (ph, pw)


def confidence_field_from_flow_pair(
    flow_fwd: FlowField,
    flow_bwd: FlowField,
    patch_size: int = 8,
    c: GmmConstraints | None = None,
    opt: OptimizerConfig | None = None,
) -> tuple[GmmParamField, ConfidenceField]:
    """Fit the mixture per patch on forward-backward flow residuals.

    The residual at target pixel q is (q + Y_fwd(q)) carried back through
    the backward flow, minus q; for mutually inverse flows it vanishes. Each
    patch_size x patch_size patch with at least 8 valid residuals gets its
    own fit; its disk-mass confidence is broadcast to the patch's pixels.
    Patches with fewer residuals, and pixels without a valid residual, get
    confidence 0.
    """
    if (flow_fwd.width, flow_fwd.height) != (flow_bwd.width, flow_bwd.height):
        raise DimMismatch("forward and backward flows must share dimensions")
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    c = c or GmmConstraints()
    opt = opt or OptimizerConfig()
    h, w = flow_fwd.height, flow_fwd.width
    r2, mask, pixel_valid, (ph, pw) = _patch_residuals(flow_fwd, flow_bwd, patch_size)
    counts = mask.sum(axis=1)
    fit_rows = counts >= MIN_PATCH_SAMPLES
    alpha = np.full(ph * pw, 0.5)
    sp = np.full(ph * pw, 0.5 * c.delta_plus)
    lo = c.delta_plus + c.margin
    sm = np.full(ph * pw, lo + 0.5 * (c.delta_minus - lo))
    patch_ok = fit_rows.copy()
    if fit_rows.any():
        ra, rsp, rsm, _, ok = _fit_raw_batch(r2[fit_rows], mask[fit_rows], c, opt)
        a_f, sp_f, sm_f = _constrain_arrays(ra, rsp, rsm, c)
        alpha[fit_rows] = a_f
        sp[fit_rows] = sp_f
        sm[fit_rows] = sm_f
        patch_ok[fit_rows] &= ok
    conf_patch = np.where(patch_ok, _confidence_arrays(alpha, sp, sm, c.radius_r), 0.0)
    conf_full = np.repeat(np.repeat(conf_patch.reshape(ph, pw), patch_size, 0), patch_size, 1)
    m = np.where(pixel_valid, conf_full[:h, :w], 0.0)
    params_field = GmmParamField(
        patch_size,
        w,
        h,
        alpha.reshape(ph, pw),
        sp.reshape(ph, pw),
        sm.reshape(ph, pw),
        patch_ok.reshape(ph, pw),
    )
    return params_field, ConfidenceField(w, h, m)


# ---------------------------------------------------------------------------
# Serialization.


def save_confidence_field(path: str, cf: ConfidenceField) -> None:
    write_cfld(path, cf.m[..., None])


def load_confidence_field(path: str) -> ConfidenceField:
    data = read_cfld(path)
    if data.shape[-1] != 1:
        raise DimMismatch(f"{path}: confidence field must have 1 channel, got {data.shape[-1]}")
    h, w, _ = data.shape
    return ConfidenceField(w, h, np.clip(data[..., 0], 0.0, 1.0))


def save_param_field(path: str, pf: GmmParamField) -> None:
    data = np.stack([pf.alpha_plus, pf.sigma_plus_sq, pf.sigma_minus_sq], axis=-1)
    write_cfld(path, data)


def confidence_to_png(path: str, cf: ConfidenceField) -> None:
    """Dump confidence as 8-bit grayscale (round(255 * m))."""
    save_gray8_png(path, np.round(255.0 * cf.m).astype(np.uint8))
