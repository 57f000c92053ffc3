"""Per-subject preprocessing: bias correction, template registration, masking.

For a subject with N MRI and M PET sessions the pipeline produces exactly
N + M volumes on the standard template grid:

  MRI: bias-correct every session, build the subject's average template
  (reference: first time point), register each corrected scan to the template
  (12 DOF), register the template to the standard space (12 DOF), then warp
  each scan with the composed transform in a single interpolation pass and
  zero non-brain voxels.

  PET: motion-correct the frames of each session, register the mean frame to
  the average template (6 DOF), compose with the template-to-standard
  transform, normalize by the cerebellum reference (mask pulled back to
  native space through the inverse chain, so the division happens before the
  one resampling pass), warp once, mask.

Every output can be re-derived from its report entry: one recorded transform
applied to the recorded native image, then the brain mask.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .biasfield import BiasFieldParams, correct, estimate_bias
from .errors import NeurofuseError
from .register import Metric, RegistrationOptions, build_average_template, motion_correct_frames, register_affine
from .volio import (
    AffineTransform,
    Dof,
    GridMismatch,
    GridSpec,
    Interp,
    Volume3D,
    compose,
    invert,
    load_volume,
    resample,
)

logger = logging.getLogger(__name__)

__all__ = [
    "EmptyCerebellumReference",
    "MriSession",
    "PetSession",
    "Diagnosis",
    "SubjectRecord",
    "PipelineAssets",
    "OutputRecord",
    "PreprocessReport",
    "preprocess_subject",
    "apply_mask",
    "normalize_pet_reference",
]

LABEL_HEALTHY = "Healthy"
LABEL_AD = "AD"
LABELS = (LABEL_HEALTHY, LABEL_AD)


class EmptyCerebellumReference(NeurofuseError):
    """Cerebellum reference region is empty or has non-positive mean."""


@dataclass
class MriSession:
    date: dt.date
    path: str | None = None
    volume: Volume3D | None = None

    def load(self) -> Volume3D:
        if self.volume is not None:
            return self.volume
        if self.path is None:
            raise NeurofuseError(f"MRI session {self.date} has neither volume nor path")
        return load_volume(self.path)


@dataclass
class PetSession:
    date: dt.date
    frame_paths: tuple[str, ...] = ()
    frames: tuple[Volume3D, ...] | None = None

    def load_frames(self) -> list[Volume3D]:
        if self.frames is not None:
            return list(self.frames)
        if not self.frame_paths:
            raise NeurofuseError(f"PET session {self.date} has neither frames nor paths")
        return [load_volume(p) for p in self.frame_paths]


@dataclass(frozen=True)
class Diagnosis:
    date: dt.date
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass
class SubjectRecord:
    """One patient: scan sessions plus diagnosis events."""

    subject_id: str
    mri_sessions: list[MriSession] = field(default_factory=list)
    pet_sessions: list[PetSession] = field(default_factory=list)
    diagnoses: list[Diagnosis] = field(default_factory=list)

    def __post_init__(self):
        for name, sessions in (("MRI", self.mri_sessions), ("PET", self.pet_sessions)):
            dates = [s.date for s in sessions]
            if len(dates) != len(set(dates)):
                raise ValueError(
                    f"subject {self.subject_id}: duplicate {name} session dates"
                )


@dataclass(frozen=True)
class PipelineAssets:
    """Standard-space template and masks; all three must share one grid."""

    mni_template: Volume3D
    brain_mask: Volume3D
    cerebellum_mask: Volume3D

    def __post_init__(self):
        grid = self.mni_template.grid
        for name in ("brain_mask", "cerebellum_mask"):
            vol = getattr(self, name)
            if not vol.grid.same_grid(grid):
                raise GridMismatch(f"{name} is not on the template grid")
            vals = np.unique(vol.data)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise ValueError(f"{name} must be {{0,1}}-valued")

    @classmethod
    def from_directory(cls, path) -> "PipelineAssets":
        path = Path(path)

        def pick(stem):
            for suffix in (".nii.gz", ".nii"):
                p = path / (stem + suffix)
                if p.exists():
                    return load_volume(p)
            raise FileNotFoundError(f"missing asset {stem}.nii[.gz] in {path}")

        return cls(pick("mni_template"), pick("brain_mask"), pick("cerebellum_mask"))


@dataclass
class OutputRecord:
    """Provenance for one output volume.

    The output equals ``apply_mask(resample(native, transform_to_mni, grid),
    brain_mask)`` exactly; ``native`` is retained only when the pipeline ran
    with ``keep_intermediates``.
    """

    modality: str  # "mri" | "pet"
    date: dt.date
    transform_to_mni: np.ndarray
    interp: str = "trilinear"
    scale: float | None = None  # PET cerebellum normalization constant
    native: Volume3D | None = None

    def to_dict(self) -> dict:
        out = {
            "modality": self.modality,
            "date": self.date.isoformat(),
            "transform_to_mni": [float(v) for v in self.transform_to_mni.ravel()],
            "interp": self.interp,
        }
        if self.scale is not None:
            out["scale"] = float(self.scale)
        return out


@dataclass
class PreprocessReport:
    subject_id: str
    template_to_mni: np.ndarray | None = None
    scan_to_template: dict[str, list[float]] = field(default_factory=dict)
    outputs: list[OutputRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "template_to_mni": (
                None
                if self.template_to_mni is None
                else [float(v) for v in self.template_to_mni.ravel()]
            ),
            "scan_to_template": self.scan_to_template,
            "outputs": [o.to_dict() for o in self.outputs],
        }


def apply_mask(vol: Volume3D, mask: Volume3D) -> Volume3D:
    """Zero everything outside the mask (elementwise product)."""
    if not vol.grid.same_grid(mask.grid):
        raise GridMismatch("volume and mask are on different grids")
    return vol.with_data(vol.data * mask.data)


def normalize_pet_reference(pet: Volume3D, reference_mask: Volume3D) -> tuple[Volume3D, float]:
    """Divide by the mean uptake inside the reference region.

    Returns the normalized volume and the scale that was divided out; the
    output's mean over the reference region is 1.
    """
    if not pet.grid.same_grid(reference_mask.grid):
        raise GridMismatch("PET and reference mask are on different grids")
    sel = reference_mask.data > 0.5
    if not sel.any():
        raise EmptyCerebellumReference("reference mask selects no voxels")
    scale = float(pet.data[sel].astype(np.float64).mean())
    if scale <= 0:
        raise EmptyCerebellumReference(f"reference mean is {scale}, must be > 0")
    return pet.with_data(pet.data.astype(np.float64) / scale), scale


def _annotate(exc: NeurofuseError, subject_id: str, date: dt.date):
    return type(exc)(f"subject {subject_id}, session {date.isoformat()}: {exc}")


def preprocess_subject(
    subject: SubjectRecord,
    assets: PipelineAssets,
    opts: RegistrationOptions | None = None,
    bias_params: BiasFieldParams | None = None,
    keep_intermediates: bool = False,
) -> tuple[list[Volume3D], list[Volume3D], PreprocessReport]:
    """Run the full per-subject pipeline; returns (mri_out, pet_out, report).

    Outputs are ordered by session date and live on the assets' grid with
    non-brain voxels exactly zero.  Each output is produced by one
    interpolation pass from its corrected native image via a composed
    transform, recorded in the report.
    """
    if not subject.mri_sessions:
        raise ValueError(f"subject {subject.subject_id}: pipeline needs >= 1 MRI session")
    opts = opts or RegistrationOptions()
    mri_sessions = sorted(subject.mri_sessions, key=lambda s: s.date)
    pet_sessions = sorted(subject.pet_sessions, key=lambda s: s.date)
    mni_grid = assets.mni_template.grid
    report = PreprocessReport(subject_id=subject.subject_id)

    # 1. bias-correct every MRI (foreground mask: none supplied upstream yet)
    corrected: list[Volume3D] = []
    for session in mri_sessions:
        try:
            vol = session.load()
            model = estimate_bias(vol, None, bias_params)
            corrected.append(correct(vol, model))
        except NeurofuseError as exc:
            raise _annotate(exc, subject.subject_id, session.date) from exc

    # 2. subject average template, reference = first time point
    within = replace(opts, dof=Dof.AFFINE12, metric=Metric.NCC)
    template, _ = build_average_template(corrected, within)

    # 3. each corrected scan -> template (12 DOF)
    scan_to_avg: list[AffineTransform] = []
    for session, vol in zip(mri_sessions, corrected):
        try:
            t = register_affine(vol, template, within)
        except NeurofuseError as exc:
            raise _annotate(exc, subject.subject_id, session.date) from exc
        scan_to_avg.append(t)
        report.scan_to_template[session.date.isoformat()] = [
            float(v) for v in t.matrix.ravel()
        ]

    # 4. template -> standard space (12 DOF, cross-modal tolerant metric)
    to_mni_opts = replace(opts, dof=Dof.AFFINE12, metric=Metric.CORRELATION_RATIO)
    t_avg_to_mni = register_affine(template, assets.mni_template, to_mni_opts)
    report.template_to_mni = np.asarray(t_avg_to_mni.matrix)

    # 5 + 6. one resampling pass per scan, then skull strip
    mri_out: list[Volume3D] = []
    for session, vol, t_scan in zip(mri_sessions, corrected, scan_to_avg):
        t_total = compose(t_avg_to_mni, t_scan)
        out = apply_mask(resample(vol, t_total, mni_grid), assets.brain_mask)
        mri_out.append(out)
        report.outputs.append(
            OutputRecord(
                modality="mri",
                date=session.date,
                transform_to_mni=np.asarray(t_total.matrix),
                native=vol if keep_intermediates else None,
            )
        )

    # PET: motion correct, register via the average template, normalize, warp
    pet_out: list[Volume3D] = []
    pet_opts = replace(opts, dof=Dof.RIGID6, metric=Metric.CORRELATION_RATIO)
    frame_opts = replace(opts, dof=Dof.RIGID6, metric=Metric.NCC)
    for session in pet_sessions:
        try:
            frames = session.load_frames()
            mean_pet = motion_correct_frames(frames, frame_opts)
            t_pet_to_avg = register_affine(mean_pet, template, pet_opts)
            t_pet_to_mni = compose(t_avg_to_mni, t_pet_to_avg)
            native_cereb = resample(
                assets.cerebellum_mask,
                invert(t_pet_to_mni),
                mean_pet.grid,
                interp=Interp.NEAREST,
            )
            norm_pet, scale = normalize_pet_reference(mean_pet, native_cereb)
            out = apply_mask(resample(norm_pet, t_pet_to_mni, mni_grid), assets.brain_mask)
        except NeurofuseError as exc:
            raise _annotate(exc, subject.subject_id, session.date) from exc
        pet_out.append(out)
        report.outputs.append(
            OutputRecord(
                modality="pet",
                date=session.date,
                transform_to_mni=np.asarray(t_pet_to_mni.matrix),
                scale=scale,
                native=norm_pet if keep_intermediates else None,
            )
        )

    logger.info(
        "subject %s: %d MRI + %d PET outputs",
        subject.subject_id,
        len(mri_out),
        len(pet_out),
    )
    return mri_out, pet_out, report
