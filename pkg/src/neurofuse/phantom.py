"""Synthetic multi-subject, dual-modality cohorts with known ground truth.

Anatomy is a set of smooth ellipsoidal shells (cerebrum envelope, white
matter interior, ventricle, cerebellum, plus asymmetric texture blobs that
give registration something to grip).  Every session volume is rendered
analytically at its injected rigid pose, so geometric ground truth is exact:
no session is ever produced by resampling another volume.

Class effects mirror the biology being modeled: the MRI signal is
atrophy-like (ventricle dilation plus cortical thinning), the PET signal is
cortical uptake elevation relative to the cerebellum reference.  The
``amyloid_lag_fraction`` knob injects elevated uptake into a fraction of
healthy subjects, reproducing the amyloid-positive-control confound that
caps PET classification accuracy; the cerebellum's own uptake never depends
on class, keeping the reference region valid.

Geometry is sized so the whole anatomy stays inside the field of view under
the configured jitter; content clipped at the grid boundary would otherwise
bias registration.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasetmgr import Manifest, volume_ref
from .pipeline import Diagnosis, MriSession, PetSession, PipelineAssets, SubjectRecord
from .volio import AffineTransform, Dof, GridSpec, Volume3D, save_volume

__all__ = ["PhantomConfig", "Cohort", "SubjectAnatomy", "generate_cohort", "random_rigid"]

_BASE_DATE = dt.date(2010, 1, 4)


@dataclass(frozen=True)
class PhantomConfig:
    n_subjects: int = 10
    n_mri: int = 1  # MRI sessions per subject
    m_pet: int = 1  # PET sessions per subject
    dims: tuple[int, int, int] = (32, 38, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mri_signal: float = 0.3  # atrophy-like shrinkage amplitude
    pet_signal: float = 0.3  # cortical uptake elevation amplitude
    amyloid_lag_fraction: float = 0.0  # healthy subjects with elevated uptake
    bias_amplitude: float = 0.0  # log-domain MRI bias amplitude
    jitter_rot_deg: float = 0.0
    jitter_trans_vox: float = 0.0
    frame_motion_vox: float = 0.0  # inter-frame PET motion
    noise_sigma: float = 0.01
    pet_scale_range: tuple[float, float] = (0.7, 1.5)  # scanner global scale
    anatomy_variation: float = 0.02  # per-subject radius jitter
    seed: int = 0

    def __post_init__(self):
        if any(d < 16 for d in self.dims):
            raise ValueError("grid dims must be >= 16 per axis")
        for name in (
            "mri_signal", "pet_signal", "bias_amplitude",
            "jitter_rot_deg", "jitter_trans_vox", "noise_sigma",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.amyloid_lag_fraction <= 1.0:
            raise ValueError("amyloid_lag_fraction must be in [0, 1]")


# blob offsets are fractions of the cerebrum radii; amplitudes alternate sign
_BLOBS = (
    ((-0.55, -0.20, 0.10), -0.50),
    ((0.50, 0.30, -0.25), 0.85),
    ((0.05, -0.55, 0.45), -0.45),
    ((-0.20, 0.45, 0.40), 0.65),
    ((0.30, -0.15, -0.60), -0.50),
)


@dataclass(frozen=True)
class SubjectAnatomy:
    """Analytic anatomy of one subject, renderable at any rigid pose.

    All positions and radii are in world mm.  ``severity`` drives the
    structural class effect, ``amyloid_level`` the uptake elevation.
    """

    grid: GridSpec
    cerebrum_center: tuple[float, float, float]
    cerebrum_radii: tuple[float, float, float]
    ventricle_radii: tuple[float, float, float]
    cortex_inner: float  # white-matter envelope as a fraction of cerebrum radii
    cerebellum_center: tuple[float, float, float]
    cerebellum_radii: tuple[float, float, float]
    blob_amps: tuple[float, ...]
    pet_signal: float
    amyloid_level: float
    edge_mm: float = 0.7

    @classmethod
    def sample(cls, grid: GridSpec, rng, mri_signal=0.0, pet_signal=0.0,
               severity=0.0, amyloid_level=0.0, variation=0.02) -> "SubjectAnatomy":
        """Draw a subject's anatomy; zero variation gives the population shape."""
        ext = np.asarray(grid.dims) * np.asarray(grid.spacing)
        c = (np.asarray(grid.dims) - 1) / 2.0 * np.asarray(grid.spacing)

        def jitter(n):
            return 1.0 + variation * rng.standard_normal(n) if variation > 0 else np.ones(n)

        cer_center = c + np.array([0.0, 0.02, 0.07]) * ext
        cer_center = cer_center + (rng.uniform(-0.4, 0.4, 3) if variation > 0 else 0.0)
        cer_radii = np.array([0.30, 0.30, 0.24]) * ext * jitter(3)
        # structural class effect: dilated ventricles, thinner cortical band
        vent_radii = np.array([0.055, 0.09, 0.055]) * ext * (1.0 + 1.2 * mri_signal * severity) * jitter(3)
        cortex_inner = min(0.80 + 0.15 * mri_signal * severity, 0.97)
        ceb_center = c + np.array([0.0, -0.24, -0.22]) * ext
        ceb_radii = np.array([0.13, 0.10, 0.09]) * ext * jitter(3)
        amps = tuple(a * float(j) for (_, a), j in zip(_BLOBS, jitter(len(_BLOBS))))
        return cls(
            grid=grid,
            cerebrum_center=tuple(cer_center),
            cerebrum_radii=tuple(cer_radii),
            ventricle_radii=tuple(vent_radii),
            cortex_inner=float(cortex_inner),
            cerebellum_center=tuple(ceb_center),
            cerebellum_radii=tuple(ceb_radii),
            blob_amps=amps,
            pet_signal=float(pet_signal),
            amyloid_level=float(amyloid_level),
        )

    # -- rendering ---------------------------------------------------------

    def _points(self, pose: np.ndarray | None) -> np.ndarray:
        g = self.grid
        i, j, k = np.meshgrid(*[np.arange(d) for d in g.dims], indexing="ij")
        vox = np.stack([i, j, k], axis=-1).reshape(-1, 3).astype(np.float64)
        pts = vox @ g.vox2world[:3, :3].T + g.vox2world[:3, 3]
        if pose is not None:
            inv = np.linalg.inv(pose)
            pts = pts @ inv[:3, :3].T + inv[:3, 3]
        return pts

    def _shell(self, pts, center, radii, width=None):
        width = width or self.edge_mm
        r = np.sqrt((((pts - np.asarray(center)) / np.asarray(radii)) ** 2).sum(1))
        return 1.0 / (1.0 + np.exp((r - 1.0) * (float(np.mean(radii)) / width)))

    def _components(self, pts):
        env = self._shell(pts, self.cerebrum_center, self.cerebrum_radii)
        wm = self._shell(
            pts, self.cerebrum_center, np.asarray(self.cerebrum_radii) * self.cortex_inner
        )
        vent = self._shell(pts, self.cerebrum_center, self.ventricle_radii)
        ceb = self._shell(pts, self.cerebellum_center, self.cerebellum_radii)
        return env, wm, vent, ceb

    def _blobs(self, pts):
        out = np.zeros(len(pts))
        radii = np.asarray(self.cerebrum_radii)
        for (offs, _), amp in zip(_BLOBS, self.blob_amps):
            center = np.asarray(self.cerebrum_center) + np.asarray(offs) * radii
            out += amp * self._shell(pts, center, np.full(3, 0.09 * float(radii.mean()) + 1.6))
        return out

    def _finalize(self, values: np.ndarray) -> Volume3D:
        # cut the far logistic tails so the background is exactly zero
        data = values.reshape(self.grid.dims).astype(np.float32)
        data[data < 5e-3] = 0.0
        return Volume3D(self.grid.dims, self.grid.spacing, self.grid.vox2world, data)

    def render_mri(self, pose: np.ndarray | None = None) -> Volume3D:
        """T1-like contrast: bright white matter, darker cortex and CSF."""
        pts = self._points(pose)
        env, wm, vent, ceb = self._components(pts)
        data = 0.55 * env + 0.45 * wm - 0.75 * vent + 0.75 * ceb + self._blobs(pts) * wm
        return self._finalize(data)

    def render_pet(self, pose: np.ndarray | None = None) -> Volume3D:
        """Uptake map referenced to cerebellum = 1; cortex carries the signal."""
        pts = self._points(pose)
        env, wm, vent, ceb = self._components(pts)
        cortex_band = np.clip(env - wm, 0.0, None)
        uptake = 1.0 + self.pet_signal * self.amyloid_level
        data = uptake * cortex_band + 0.55 * wm - 0.40 * vent + 1.0 * ceb
        return self._finalize(data)

    # -- ground truth helpers ------------------------------------------------

    def fiducials_mm(self) -> np.ndarray:
        """Well-spread anatomical landmarks in world mm."""
        c = np.asarray(self.cerebrum_center)
        r = np.asarray(self.cerebrum_radii)
        pts = [c, np.asarray(self.cerebellum_center)]
        for axis in range(3):
            for sign in (-1.0, 1.0):
                offset = np.zeros(3)
                offset[axis] = sign * 0.8 * r[axis]
                pts.append(c + offset)
        return np.asarray(pts)

    def brain_support(self, threshold: float = 0.5) -> np.ndarray:
        pts = self._points(None)
        env, _, _, ceb = self._components(pts)
        return ((env + ceb) > threshold).reshape(self.grid.dims)

    def cerebellum_support(self, threshold: float = 0.5) -> np.ndarray:
        pts = self._points(None)
        env, _, _, ceb = self._components(pts)
        return ((ceb > threshold) & (env < 0.3)).reshape(self.grid.dims)

    def true_suvr(self) -> float:
        return 1.0 + self.pet_signal * self.amyloid_level


def random_rigid(rng, max_rot_deg: float, max_trans: float, center) -> AffineTransform:
    """Uniform random rotation axis and bounded angle/translation magnitudes."""
    if max_rot_deg == 0 and max_trans == 0:
        return AffineTransform.identity(Dof.RIGID6)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, max_rot_deg))
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    trans = direction * rng.uniform(0.0, max_trans)
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = trans + np.asarray(center) - rot @ np.asarray(center)
    return AffineTransform(m, Dof.RIGID6)


@dataclass
class Cohort:
    manifest: Manifest
    assets: PipelineAssets
    ground_truth: dict


def _log_bias(cfg: PhantomConfig, rng) -> tuple[np.ndarray, dict]:
    """Smooth 1D shading along a random direction, fully described by 5 numbers."""
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    record = {
        "amplitude": cfg.bias_amplitude,
        "direction": [float(v) for v in direction],
        "phase": float(phase),
    }
    i, j, k = np.meshgrid(*[np.arange(d) / (d - 1) for d in cfg.dims], indexing="ij")
    proj = direction[0] * i + direction[1] * j + direction[2] * k
    return cfg.bias_amplitude * np.sin(math.pi * proj + phase), record


def _add_noise(vol: Volume3D, sigma: float, rng) -> Volume3D:
    """Additive noise inside the head only; background stays exactly zero."""
    if sigma <= 0:
        return vol
    data = vol.data.copy()
    inside = data > 0
    data[inside] += rng.normal(0.0, sigma, int(inside.sum())).astype(np.float32)
    data[inside] = np.maximum(data[inside], 1e-3)
    return vol.with_data(data)


def _generate_subject(cfg: PhantomConfig, index: int):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(index,)))
    grid = GridSpec.isotropic(cfg.dims, cfg.spacing)
    center = grid.center_world()
    label = "AD" if index % 2 == 1 else "Healthy"
    severity = float(rng.uniform(0.6, 1.0)) if label == "AD" else 0.0
    if label == "AD":
        amyloid = float(rng.uniform(0.8, 1.2))
    elif rng.random() < cfg.amyloid_lag_fraction:
        # healthy subject whose amyloid already runs ahead of symptoms
        amyloid = float(rng.uniform(0.8, 1.2))
    else:
        amyloid = 0.0
    anatomy = SubjectAnatomy.sample(
        grid,
        rng,
        mri_signal=cfg.mri_signal,
        pet_signal=cfg.pet_signal,
        severity=severity,
        amyloid_level=amyloid,
        variation=cfg.anatomy_variation,
    )
    sid = f"sub{index:03d}"
    base = _BASE_DATE + dt.timedelta(days=30 * index)
    gt: dict = {
        "label": label,
        "severity": severity,
        "amyloid_level": amyloid,
        "true_suvr": anatomy.true_suvr(),
        "fiducials_mm": anatomy.fiducials_mm().tolist(),
        "mri_sessions": [],
        "pet_sessions": [],
    }

    mri_sessions = []
    dx_dates = []
    for s in range(cfg.n_mri):
        date = base + dt.timedelta(days=180 * s)
        pose = random_rigid(rng, cfg.jitter_rot_deg, cfg.jitter_trans_vox * max(cfg.spacing), center)
        vol = anatomy.render_mri(pose=pose.matrix)
        logb, bias_rec = _log_bias(cfg, rng)
        if cfg.bias_amplitude > 0:
            vol = vol.with_data(vol.data * np.exp(logb).astype(np.float32))
        vol = _add_noise(vol, cfg.noise_sigma, rng)
        mri_sessions.append(MriSession(date=date, volume=vol))
        dx_dates.append(date)
        gt["mri_sessions"].append(
            {
                "date": date.isoformat(),
                "pose": [float(v) for v in pose.matrix.ravel()],
                "bias": bias_rec,
            }
        )

    pet_sessions = []
    for p in range(cfg.m_pet):
        date = base + dt.timedelta(days=180 * p + 14)
        pose = random_rigid(rng, cfg.jitter_rot_deg, cfg.jitter_trans_vox * max(cfg.spacing), center)
        scale = float(rng.uniform(*cfg.pet_scale_range))
        frames = []
        frame_records = []
        for f in range(2):
            if f == 0:
                fpose = AffineTransform.identity(Dof.RIGID6)
            else:
                fpose = random_rigid(
                    rng, 0.3 * cfg.jitter_rot_deg, cfg.frame_motion_vox * max(cfg.spacing), center
                )
            total = fpose.matrix @ pose.matrix
            frame = anatomy.render_pet(pose=total)
            frame = frame.with_data(frame.data * np.float32(scale))
            frame = _add_noise(frame, cfg.noise_sigma * scale, rng)
            frames.append(frame)
            frame_records.append([float(v) for v in fpose.matrix.ravel()])
        pet_sessions.append(PetSession(date=date, frames=tuple(frames)))
        dx_dates.append(date)
        gt["pet_sessions"].append(
            {
                "date": date.isoformat(),
                "pose": [float(v) for v in pose.matrix.ravel()],
                "scanner_scale": scale,
                "frame_poses": frame_records,
            }
        )

    diagnoses = [Diagnosis(d + dt.timedelta(days=7), label) for d in sorted(set(dx_dates))]
    record = SubjectRecord(
        subject_id=sid,
        mri_sessions=mri_sessions,
        pet_sessions=pet_sessions,
        diagnoses=diagnoses,
    )
    return record, sid, gt


def _population_assets(cfg: PhantomConfig) -> PipelineAssets:
    grid = GridSpec.isotropic(cfg.dims, cfg.spacing)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0xA55E75,)))
    anatomy = SubjectAnatomy.sample(grid, rng, variation=0.0)
    template = anatomy.render_mri()
    brain = template.with_data(anatomy.brain_support().astype(np.float32))
    cereb = template.with_data(anatomy.cerebellum_support().astype(np.float32))
    return PipelineAssets(mni_template=template, brain_mask=brain, cerebellum_mask=cereb)


def generate_cohort(cfg: PhantomConfig, out_dir=None, jobs: int = 1) -> Cohort:
    """Generate the cohort; optionally write volumes + manifests to disk.

    Deterministic for a fixed config: subject seeds are derived from the
    subject index, so results do not depend on ``jobs``.
    """
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_generate_subject, [cfg] * cfg.n_subjects, range(cfg.n_subjects)))
    else:
        results = [_generate_subject(cfg, i) for i in range(cfg.n_subjects)]

    subjects = []
    ground_truth = {"config": asdict(cfg), "subjects": {}}
    for record, sid, gt in results:
        subjects.append(record)
        ground_truth["subjects"][sid] = gt
    manifest = Manifest(subjects=subjects, provenance=f"phantom cohort seed={cfg.seed}")
    assets = _population_assets(cfg)
    cohort = Cohort(manifest=manifest, assets=assets, ground_truth=ground_truth)

    if out_dir is not None:
        _write_cohort(cohort, cfg, Path(out_dir))
    return cohort


def _write_cohort(cohort: Cohort, cfg: PhantomConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for subject in cohort.manifest.subjects:
        for session in subject.mri_sessions:
            rel = volume_ref(subject.subject_id, "mri", session.date)
            save_volume(out / rel, session.volume)
            session.path = rel
        for session in subject.pet_sessions:
            paths = []
            for f, frame in enumerate(session.frames):
                rel = f"{subject.subject_id}/pet_{session.date.isoformat()}_frame{f}.nii.gz"
                save_volume(out / rel, frame)
                paths.append(rel)
            session.frame_paths = tuple(paths)
    from .datasetmgr import save_manifest

    save_manifest(cohort.manifest, out / "manifest.json")
    (out / "ground_truth.json").write_text(
        json.dumps(cohort.ground_truth, indent=2, sort_keys=True) + "\n"
    )
    assets_dir = out / "assets"
    save_volume(assets_dir / "mni_template.nii.gz", cohort.assets.mni_template)
    save_volume(assets_dir / "brain_mask.nii.gz", cohort.assets.brain_mask)
    save_volume(assets_dir / "cerebellum_mask.nii.gz", cohort.assets.cerebellum_mask)
