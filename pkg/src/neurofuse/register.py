"""Multi-resolution affine registration (6 and 12 DOF) and its applications.

The optimizer is a derivative-free coordinate search: parameters are swept in
turn, each refined with a golden-section line search on a bracket around the
current value; when a full sweep yields no improvement the bracket sizes are
halved.  This runs coarse-to-fine over a Gaussian image pyramid.  The returned
transform maps moving-world to fixed-world coordinates (see `volio`).

Similarity is computed only over voxels that are positive in the fixed image
(zero background would otherwise dominate the statistics).  Normalized cross
correlation suits within-modality pairs; the correlation ratio tolerates
cross-modal intensity relationships.  The whole procedure is deterministic:
identical inputs produce bitwise-identical parameters.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import NeurofuseError
from .volio import AffineTransform, Dof, GridSpec, Volume3D, _resample_array, resample

__all__ = [
    "ConstantImage",
    "DivergedOptimizationWarning",
    "Metric",
    "RegistrationOptions",
    "register_affine",
    "build_average_template",
    "motion_correct_frames",
    "save_transform",
    "load_transform",
]

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class ConstantImage(NeurofuseError):
    """Similarity metrics are undefined on constant images."""


class DivergedOptimizationWarning(UserWarning):
    """Optimizer spent its evaluation budget before the search converged."""


class Metric(enum.Enum):
    NCC = "normalized_cross_correlation"
    CORRELATION_RATIO = "correlation_ratio"


@dataclass(frozen=True)
class RegistrationOptions:
    dof: Dof = Dof.RIGID6
    metric: Metric = Metric.NCC
    pyramid_levels: int = 3  # each level downsamples by 2
    max_evals_per_level: int = 4000
    convergence_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.max_evals_per_level < 10:
            raise ValueError("max_evals_per_level too small to search")

    @classmethod
    def within_modality(cls, dof: Dof = Dof.RIGID6, **kw) -> "RegistrationOptions":
        return cls(dof=dof, metric=Metric.NCC, **kw)

    @classmethod
    def cross_modal(cls, dof: Dof = Dof.RIGID6, **kw) -> "RegistrationOptions":
        return cls(dof=dof, metric=Metric.CORRELATION_RATIO, **kw)


# ---------------------------------------------------------------------------
# parameterization
# ---------------------------------------------------------------------------
# RIGID6:   [rx, ry, rz (degrees), tx, ty, tz (mm)]
# AFFINE12: rigid + [log sx, log sy, log sz, shear xy, shear xz, shear yz]
# Rotation/scale/shear act about the fixed volume's world center:
#     x' = R @ H @ S @ (x - c) + c + t


def _rotation(rx, ry, rz) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _params_to_matrix(params: np.ndarray, center: np.ndarray, dof: Dof) -> np.ndarray:
    rot = _rotation(*np.deg2rad(params[:3]))
    lin = rot
    if dof is Dof.AFFINE12:
        scale = np.diag(np.exp(params[6:9]))
        shear = np.array(
            [[1.0, params[9], params[10]], [0.0, 1.0, params[11]], [0.0, 0.0, 1.0]]
        )
        lin = rot @ shear @ scale
    m = np.eye(4)
    m[:3, :3] = lin
    m[:3, 3] = params[3:6] + center - lin @ center
    return m


def _n_params(dof: Dof) -> int:
    return 6 if dof is Dof.RIGID6 else 12


# ---------------------------------------------------------------------------
# similarity metrics
# ---------------------------------------------------------------------------

def _ncc(fixed_centered, fixed_norm, moved) -> float:
    m = moved - moved.mean(dtype=np.float64)
    denom = math.sqrt(float(np.dot(m, m))) * fixed_norm
    if denom <= 0:
        return -1.0
    return float(np.dot(fixed_centered, m)) / denom


def _correlation_ratio(fixed, moved, bins: int = 32) -> float:
    lo = float(moved.min())
    hi = float(moved.max())
    if hi - lo <= 0:
        return 0.0
    idx = np.minimum(((moved - lo) * (bins / (hi - lo))).astype(np.int32), bins - 1)
    n = np.bincount(idx, minlength=bins)
    s = np.bincount(idx, weights=fixed, minlength=bins)
    ss = np.bincount(idx, weights=fixed * fixed, minlength=bins)
    total_var = float(fixed.var(dtype=np.float64))
    if total_var <= 0:
        return 0.0
    nz = n > 0
    within = float((ss[nz] - s[nz] * s[nz] / n[nz]).sum()) / len(fixed)
    return 1.0 - within / total_var


# ---------------------------------------------------------------------------
# pyramid
# ---------------------------------------------------------------------------

def _downsample(data: np.ndarray, v2w: np.ndarray):
    smoothed = ndimage.gaussian_filter(data, sigma=1.0, mode="nearest")
    scale = np.diag([2.0, 2.0, 2.0, 1.0])
    return smoothed[::2, ::2, ::2], v2w @ scale


def _pyramid(vol: Volume3D, levels: int):
    """Fine-to-coarse list of (data float32, vox2world)."""
    out = [(vol.data.astype(np.float32), np.asarray(vol.vox2world))]
    for _ in range(levels - 1):
        data, v2w = _downsample(*out[-1])
        if min(data.shape) < 4:
            break
        out.append((data, v2w))
    return out


# ---------------------------------------------------------------------------
# coordinate search with golden-section line searches
# ---------------------------------------------------------------------------

class _Budget:
    def __init__(self, limit):
        self.limit = limit
        self.used = 0

    def take(self) -> bool:
        self.used += 1
        return self.used <= self.limit


def _golden_line(cost, params, i, step, f_best, budget, gs_iters=8):
    """Golden-section search for parameter ``i`` on [p - step, p + step]."""
    a = params[i] - step
    b = params[i] + step

    def at(x):
        p = params.copy()
        p[i] = x
        return cost(p)

    best_x, best_f = params[i], f_best
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    if not budget.take():
        return best_x, best_f, False
    fc = at(c)
    if fc < best_f:
        best_x, best_f = c, fc
    if not budget.take():
        return best_x, best_f, best_f < f_best
    fd = at(d)
    if fd < best_f:
        best_x, best_f = d, fd
    for _ in range(gs_iters):
        if not budget.take():
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = at(c)
            if fc < best_f:
                best_x, best_f = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = at(d)
            if fd < best_f:
                best_x, best_f = d, fd
    return best_x, best_f, best_f < f_best


def _optimize_level(cost, params, steps, budget, tol):
    """Sweep parameters with line searches, halving steps when sweeps stall.

    After an improving sweep a pattern move (Hooke-Jeeves) retries the net
    sweep displacement, which accelerates progress along valleys that couple
    several parameters.
    """
    f_best = cost(params)
    budget.take()
    min_steps = steps * 1e-3
    while budget.used < budget.limit:
        base = params.copy()
        improved = False
        for i in range(len(params)):
            x, f, better = _golden_line(cost, params, i, steps[i], f_best, budget)
            if better and f < f_best - tol:
                params[i] = x
                f_best = f
                improved = True
            if budget.used >= budget.limit:
                break
        if improved:
            delta = params - base
            while np.any(delta != 0) and budget.take():
                trial = params + delta
                f_trial = cost(trial)
                if f_trial < f_best - tol:
                    params = trial
                    f_best = f_trial
                else:
                    break
        else:
            steps = steps * 0.5
            if np.all(steps < min_steps * 8):
                return params, f_best, True
    return params, f_best, False


def _support_stats(fixed_data, metric):
    support = fixed_data > 0
    if not support.any():
        raise ConstantImage("fixed image has no positive support")
    fvals = fixed_data[support].astype(np.float64)
    if metric is Metric.NCC:
        centered = fvals - fvals.mean()
        norm = math.sqrt(float(np.dot(centered, centered)))
        if norm <= 0:
            raise ConstantImage("fixed image is constant over its support")
        return support, centered, norm
    return support, fvals, None


def register_affine(
    moving: Volume3D, fixed: Volume3D, opts: RegistrationOptions | None = None
) -> AffineTransform:
    """Find the transform (moving-world -> fixed-world) maximizing similarity.

    RIGID6 searches 3 rotations + 3 translations; AFFINE12 adds per-axis log
    scales and 3 shears.  Rotation center is the fixed volume's world center.
    Emits :class:`DivergedOptimizationWarning` (and still returns the best
    transform seen) when a level exhausts its evaluation budget before the
    step sizes converge.
    """
    opts = opts or RegistrationOptions()
    if float(moving.data.std()) == 0.0 or float(fixed.data.std()) == 0.0:
        raise ConstantImage("cannot register constant images")

    center = fixed.grid.center_world()
    fixed_pyr = _pyramid(fixed, opts.pyramid_levels)
    moving_pyr = _pyramid(moving, opts.pyramid_levels)
    n_levels = min(len(fixed_pyr), len(moving_pyr))

    params = np.zeros(_n_params(opts.dof))
    spacing = float(max(fixed.spacing))
    converged_all = True

    for level in range(n_levels - 1, -1, -1):
        fdata, fv2w = fixed_pyr[level]
        mdata, mv2w = moving_pyr[min(level, len(moving_pyr) - 1)]
        support, fixed_ref, fixed_norm = _support_stats(fdata, opts.metric)
        mv2w_inv = np.linalg.inv(mv2w)
        out_shape = fdata.shape

        def cost(p, _f=fdata, _m=mdata, _sup=support, _ref=fixed_ref, _nrm=fixed_norm,
                 _mi=mv2w_inv, _fv=fv2w, _shape=out_shape):
            t = _params_to_matrix(p, center, opts.dof)
            vox2vox = _mi @ np.linalg.inv(t) @ _fv
            moved = _resample_array(_m, vox2vox, _shape, order=1)[_sup]
            if opts.metric is Metric.NCC:
                return -_ncc(_ref, _nrm, moved)
            return -_correlation_ratio(_ref, moved.astype(np.float64))

        scale = 2.0**level
        steps = np.array([4.0, 4.0, 4.0] + [2.0 * spacing * scale] * 3)
        if opts.dof is Dof.AFFINE12:
            steps = np.concatenate([steps, [0.08, 0.08, 0.08, 0.08, 0.08, 0.08]])
        budget = _Budget(opts.max_evals_per_level)
        params, _, converged = _optimize_level(
            cost, params, steps, budget, opts.convergence_tol
        )
        if level == 0:
            # polish: restart the search with small fresh brackets, which
            # recovers precision lost to early step halvings
            steps = np.array([1.0, 1.0, 1.0] + [0.5 * spacing] * 3)
            if opts.dof is Dof.AFFINE12:
                steps = np.concatenate([steps, [0.02] * 6])
            budget = _Budget(opts.max_evals_per_level)
            params, _, converged = _optimize_level(
                cost, params, steps, budget, opts.convergence_tol
            )
        converged_all = converged_all and converged

    if not converged_all:
        warnings.warn(
            "registration exhausted its evaluation budget before converging; "
            "returning best transform seen",
            DivergedOptimizationWarning,
            stacklevel=2,
        )
    return AffineTransform(_params_to_matrix(params, center, opts.dof), opts.dof)


def build_average_template(
    scans: list[Volume3D], opts: RegistrationOptions | None = None
) -> tuple[Volume3D, list[AffineTransform]]:
    """Register every scan to the first and average them on its grid.

    Returns the template plus one transform per scan mapping it into template
    space (the first is the identity).
    """
    if not scans:
        raise ValueError("need at least one scan to build a template")
    opts = opts or RegistrationOptions(dof=Dof.AFFINE12)
    reference = scans[0]
    transforms = [AffineTransform.identity(opts.dof)]
    acc = reference.data.astype(np.float64).copy()
    for scan in scans[1:]:
        t = register_affine(scan, reference, opts)
        transforms.append(t)
        acc += resample(scan, t, reference.grid).data
    template = reference.with_data(acc / len(scans))
    return template, transforms


def motion_correct_frames(
    frames: list[Volume3D], opts: RegistrationOptions | None = None
) -> Volume3D:
    """Rigidly align frames to the first one and return their mean."""
    if not frames:
        raise ValueError("need at least one frame")
    grid0 = frames[0].grid
    for f in frames[1:]:
        if not f.grid.same_grid(grid0):
            raise ValueError("PET frames must share a grid")
    if len(frames) == 1:
        return frames[0]
    opts = replace(opts or RegistrationOptions(), dof=Dof.RIGID6)
    acc = frames[0].data.astype(np.float64).copy()
    for frame in frames[1:]:
        t = register_affine(frame, frames[0], opts)
        acc += resample(frame, t, grid0).data
    return frames[0].with_data(acc / len(frames))


# ---------------------------------------------------------------------------
# plain-text transform files
# ---------------------------------------------------------------------------

def save_transform(path, t: AffineTransform) -> None:
    """One transform per file: a DOF tag comment plus 16 row-major decimals."""
    lines = [f"# dof: {t.dof.name.lower()}"]
    for row in t.matrix:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_transform(path) -> AffineTransform:
    dof = Dof.AFFINE12
    values: list[float] = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            tag = line.lstrip("#").strip().lower()
            if tag.startswith("dof:"):
                name = tag.split(":", 1)[1].strip()
                dof = Dof.RIGID6 if name == "rigid6" else Dof.AFFINE12
            continue
        values.extend(float(v) for v in line.split())
    if len(values) != 16:
        raise NeurofuseError(f"transform file holds {len(values)} values, expected 16")
    return AffineTransform(np.asarray(values).reshape(4, 4), dof)
