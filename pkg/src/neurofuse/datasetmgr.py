"""Cohort manifests, diagnosis pairing, patient-level splits, fusion pairing.

A manifest is the machine-readable cohort definition: subjects with their
scan sessions and diagnosis events, serialized as JSON with ISO-8601 dates.
Samples are labeled by pairing each scan with the nearest diagnosis inside a
time window; train/test splits operate on whole patients so no individual's
scans can leak across the boundary.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NeurofuseError
from .pipeline import LABELS, Diagnosis, MriSession, PetSession, SubjectRecord

logger = logging.getLogger(__name__)

__all__ = [
    "UnsatisfiableSplit",
    "Manifest",
    "LabeledSample",
    "pair_sessions_with_diagnosis",
    "split_by_patient",
    "pair_modalities",
    "load_manifest",
    "save_manifest",
    "volume_ref",
]

MODALITY_MRI = "mri"
MODALITY_PET = "pet"
MODALITY_FUSED = "fused"


class UnsatisfiableSplit(NeurofuseError):
    """Cannot place both labels on both sides of the split."""


def volume_ref(subject_id: str, modality: str, date: dt.date) -> str:
    """Canonical relative path of a preprocessed volume."""
    return f"{subject_id}/{modality}_{date.isoformat()}.nii.gz"


@dataclass(frozen=True)
class LabeledSample:
    subject_id: str
    modality: str  # mri | pet | fused
    label: str
    date: dt.date
    mri_ref: str | None = None
    pet_ref: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")
        if self.modality == MODALITY_MRI and self.mri_ref is None:
            raise ValueError("MRI sample needs an mri_ref")
        if self.modality == MODALITY_PET and self.pet_ref is None:
            raise ValueError("PET sample needs a pet_ref")
        if self.modality == MODALITY_FUSED and (
            self.mri_ref is None or self.pet_ref is None
        ):
            raise ValueError("fused sample needs exactly one MRI and one PET ref")


@dataclass
class Manifest:
    subjects: list[SubjectRecord] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        ids = [s.subject_id for s in self.subjects]
        if len(ids) != len(set(ids)):
            raise ValueError("subject ids must be unique")

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)


# ---------------------------------------------------------------------------
# labeling and pairing
# ---------------------------------------------------------------------------

def _nearest_diagnosis(diagnoses, date: dt.date, window_days: int):
    """Nearest diagnosis within the window; ties go to the later date."""
    best = None
    best_key = None
    for dx in diagnoses:
        delta = (dx.date - date).days
        if abs(delta) > window_days:
            continue
        key = (abs(delta), 0 if delta >= 0 else 1)
        if best_key is None or key < best_key:
            best, best_key = dx, key
    return best


def pair_sessions_with_diagnosis(
    subject: SubjectRecord, window_days: int = 60
) -> list[LabeledSample]:
    """Label every scan session with the nearest diagnosis within the window.

    Sessions without a qualifying diagnosis are dropped (logged, not fatal).
    """
    out: list[LabeledSample] = []
    for session in sorted(subject.mri_sessions, key=lambda s: s.date):
        dx = _nearest_diagnosis(subject.diagnoses, session.date, window_days)
        if dx is None:
            logger.info(
                "dropping MRI %s of subject %s: no diagnosis within %d days",
                session.date, subject.subject_id, window_days,
            )
            continue
        ref = session.path or volume_ref(subject.subject_id, MODALITY_MRI, session.date)
        out.append(
            LabeledSample(subject.subject_id, MODALITY_MRI, dx.label, session.date, mri_ref=ref)
        )
    for session in sorted(subject.pet_sessions, key=lambda s: s.date):
        dx = _nearest_diagnosis(subject.diagnoses, session.date, window_days)
        if dx is None:
            logger.info(
                "dropping PET %s of subject %s: no diagnosis within %d days",
                session.date, subject.subject_id, window_days,
            )
            continue
        ref = volume_ref(subject.subject_id, MODALITY_PET, session.date)
        out.append(
            LabeledSample(subject.subject_id, MODALITY_PET, dx.label, session.date, pet_ref=ref)
        )
    return out


def split_by_patient(
    samples: list[LabeledSample], test_fraction: float, seed: int
) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Patient-level split: every subject's samples land on exactly one side.

    Subjects are shuffled with the seeded generator and assigned to the test
    side until it holds at least ``test_fraction`` of the samples.  Raises
    :class:`UnsatisfiableSplit` unless both sides end up with both labels.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    by_subject: dict[str, list[LabeledSample]] = {}
    for s in samples:
        by_subject.setdefault(s.subject_id, []).append(s)
    ids = sorted(by_subject)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]

    target = test_fraction * len(samples)
    test_ids: set[str] = set()
    count = 0
    for sid in order:
        if count >= target:
            break
        test_ids.add(sid)
        count += len(by_subject[sid])

    train = [s for s in samples if s.subject_id not in test_ids]
    test = [s for s in samples if s.subject_id in test_ids]
    for side, name in ((train, "train"), (test, "test")):
        labels = {s.label for s in side}
        if set(LABELS) - labels:
            raise UnsatisfiableSplit(
                f"{name} side is missing label(s) {sorted(set(LABELS) - labels)}; "
                f"retry with another seed or fraction"
            )
    return train, test


def pair_modalities(
    subject: SubjectRecord,
    labeled: list[LabeledSample],
    max_gap_days: int = 90,
) -> list[LabeledSample]:
    """Pair each PET sample with its nearest-in-time MRI sample.

    Pairs are formed greedily by ascending time gap; every MRI is used at
    most once; the fused sample takes the PET session's label and date.
    Unpaired PET samples are logged and skipped.
    """
    mri = [s for s in labeled if s.subject_id == subject.subject_id and s.modality == MODALITY_MRI]
    pet = [s for s in labeled if s.subject_id == subject.subject_id and s.modality == MODALITY_PET]
    candidates = []
    for p in pet:
        for m in mri:
            gap = abs((p.date - m.date).days)
            if gap <= max_gap_days:
                candidates.append((gap, p.date, m.date, p, m))
    candidates.sort(key=lambda c: c[:3])

    used_mri: set[dt.date] = set()
    used_pet: set[dt.date] = set()
    fused: list[LabeledSample] = []
    for gap, _, _, p, m in candidates:
        if p.date in used_pet or m.date in used_mri:
            continue
        used_pet.add(p.date)
        used_mri.add(m.date)
        fused.append(
            LabeledSample(
                subject.subject_id,
                MODALITY_FUSED,
                p.label,
                p.date,
                mri_ref=m.mri_ref,
                pet_ref=p.pet_ref,
            )
        )
    for p in pet:
        if p.date not in used_pet:
            logger.info(
                "PET %s of subject %s left unpaired (no MRI within %d days)",
                p.date, subject.subject_id, max_gap_days,
            )
    fused.sort(key=lambda s: s.date)
    return fused


# ---------------------------------------------------------------------------
# manifest JSON
# ---------------------------------------------------------------------------

def manifest_to_dict(manifest: Manifest) -> dict:
    subjects = []
    for s in manifest.subjects:
        subjects.append(
            {
                "id": s.subject_id,
                "mri": [
                    {"date": m.date.isoformat(), "path": m.path}
                    for m in s.mri_sessions
                ],
                "pet": [
                    {"date": p.date.isoformat(), "frames": list(p.frame_paths)}
                    for p in s.pet_sessions
                ],
                "dx": [
                    {"date": d.date.isoformat(), "label": d.label}
                    for d in s.diagnoses
                ],
            }
        )
    return {"subjects": subjects, "provenance": manifest.provenance}


def manifest_from_dict(payload: dict) -> Manifest:
    subjects = []
    for entry in payload.get("subjects", []):
        subjects.append(
            SubjectRecord(
                subject_id=entry["id"],
                mri_sessions=[
                    MriSession(dt.date.fromisoformat(m["date"]), path=m.get("path"))
                    for m in entry.get("mri", [])
                ],
                pet_sessions=[
                    PetSession(
                        dt.date.fromisoformat(p["date"]),
                        frame_paths=tuple(p.get("frames", [])),
                    )
                    for p in entry.get("pet", [])
                ],
                diagnoses=[
                    Diagnosis(dt.date.fromisoformat(d["date"]), d["label"])
                    for d in entry.get("dx", [])
                ],
            )
        )
    return Manifest(subjects=subjects, provenance=payload.get("provenance", ""))


def load_manifest(path) -> Manifest:
    return manifest_from_dict(json.loads(Path(path).read_text()))


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_to_dict(manifest), indent=2) + "\n")
