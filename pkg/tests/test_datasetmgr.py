"""Diagnosis pairing, patient-level splits, fusion pairing, manifest JSON."""

import datetime as dt

import numpy as np
import pytest

from neurofuse.datasetmgr import (
    LabeledSample,
    Manifest,
    UnsatisfiableSplit,
    load_manifest,
    pair_modalities,
    pair_sessions_with_diagnosis,
    save_manifest,
    split_by_patient,
)
from neurofuse.pipeline import Diagnosis, MriSession, PetSession, SubjectRecord


def day(iso):
    return dt.date.fromisoformat(iso)


def subject_with(mri=(), pet=(), dx=(), sid="s1"):
    return SubjectRecord(
        subject_id=sid,
        mri_sessions=[MriSession(day(d)) for d in mri],
        pet_sessions=[PetSession(day(d)) for d in pet],
        diagnoses=[Diagnosis(day(d), label) for d, label in dx],
    )


class TestDiagnosisPairing:
    def test_one_day_gap_labels(self):
        s = subject_with(mri=["2011-03-01"], dx=[("2011-03-02", "AD")])
        samples = pair_sessions_with_diagnosis(s)
        assert len(samples) == 1
        assert samples[0].label == "AD"
        assert samples[0].modality == "mri"

    def test_61_days_dropped(self):
        s = subject_with(mri=["2011-03-01"], dx=[("2011-05-01", "AD")])  # 61 days
        assert pair_sessions_with_diagnosis(s, window_days=60) == []

    def test_60_days_kept(self):
        s = subject_with(mri=["2011-03-01"], dx=[("2011-04-30", "AD")])  # 60 days
        assert len(pair_sessions_with_diagnosis(s, window_days=60)) == 1

    def test_nearest_wins(self):
        # diagnoses at -10 and +5 days: the +5 one is nearer
        s = subject_with(
            mri=["2011-03-11"],
            dx=[("2011-03-01", "AD"), ("2011-03-16", "Healthy")],
        )
        samples = pair_sessions_with_diagnosis(s)
        assert samples[0].label == "Healthy"

    def test_tie_prefers_later_date(self):
        s = subject_with(
            mri=["2011-03-11"],
            dx=[("2011-03-06", "AD"), ("2011-03-16", "Healthy")],
        )
        samples = pair_sessions_with_diagnosis(s)
        assert samples[0].label == "Healthy"

    def test_pet_sessions_labeled_too(self):
        s = subject_with(
            mri=["2011-03-01"], pet=["2011-03-05"], dx=[("2011-03-02", "AD")]
        )
        samples = pair_sessions_with_diagnosis(s)
        assert {x.modality for x in samples} == {"mri", "pet"}


def make_samples(n_subjects, per_subject=2, label_of=None):
    label_of = label_of or (lambda i: "AD" if i % 2 else "Healthy")
    out = []
    for i in range(n_subjects):
        for s in range(per_subject):
            out.append(
                LabeledSample(
                    subject_id=f"s{i:02d}",
                    modality="mri",
                    label=label_of(i),
                    date=day("2011-01-01") + dt.timedelta(days=30 * s),
                    mri_ref=f"s{i:02d}/mri_{s}.nii.gz",
                )
            )
    return out


class TestSplitByPatient:
    def test_subject_lands_on_one_side(self):
        samples = make_samples(6, per_subject=5)
        train, test = split_by_patient(samples, 0.3, seed=0)
        train_ids = {s.subject_id for s in train}
        test_ids = {s.subject_id for s in test}
        assert not train_ids & test_ids
        for sid in test_ids:
            assert sum(1 for s in test if s.subject_id == sid) == 5

    def test_same_seed_identical(self):
        samples = make_samples(20)
        a = split_by_patient(samples, 0.3, seed=7)
        b = split_by_patient(samples, 0.3, seed=7)
        assert a == b

    def test_greedy_assignment_reaches_fraction(self):
        samples = make_samples(10, per_subject=2)
        train, test = split_by_patient(samples, 0.3, seed=1)
        assert len(test) >= 6  # >= 30% of 20
        assert len(train) + len(test) == 20

    def test_zero_leakage_many_seeds(self):
        # seeds whose shuffle puts one label entirely on a side raise instead
        # of leaking; every successful split must be leak-free
        samples = make_samples(20, per_subject=3)
        succeeded = 0
        for seed in range(50):
            try:
                train, test = split_by_patient(samples, 0.25, seed=seed)
            except UnsatisfiableSplit:
                continue
            succeeded += 1
            assert not {s.subject_id for s in train} & {s.subject_id for s in test}
        assert succeeded >= 40

    def test_unsatisfiable_split_raises(self):
        # one subject per label: one side must end up single-labeled
        samples = make_samples(2, per_subject=2)
        with pytest.raises(UnsatisfiableSplit):
            split_by_patient(samples, 0.5, seed=0)

    def test_bad_fraction_rejected(self):
        samples = make_samples(4)
        with pytest.raises(ValueError):
            split_by_patient(samples, 0.0, seed=0)
        with pytest.raises(ValueError):
            split_by_patient(samples, 1.0, seed=0)


class TestPairModalities:
    def test_same_day_pairs(self):
        s = subject_with(
            mri=["2011-03-01"], pet=["2011-03-01"], dx=[("2011-03-02", "AD")]
        )
        labeled = pair_sessions_with_diagnosis(s)
        fused = pair_modalities(s, labeled)
        assert len(fused) == 1
        assert fused[0].modality == "fused"
        assert fused[0].mri_ref and fused[0].pet_ref
        assert fused[0].label == "AD"

    def test_beyond_gap_unpaired(self):
        s = subject_with(
            mri=["2011-01-01"],
            pet=["2011-06-01"],
            dx=[("2011-01-02", "AD"), ("2011-06-02", "AD")],
        )
        labeled = pair_sessions_with_diagnosis(s)
        assert pair_modalities(s, labeled, max_gap_days=90) == []

    def test_two_pet_one_mri_greedy(self):
        s = subject_with(
            mri=["2011-03-10"],
            pet=["2011-03-01", "2011-03-12"],
            dx=[("2011-03-05", "AD")],
        )
        labeled = pair_sessions_with_diagnosis(s)
        fused = pair_modalities(s, labeled, max_gap_days=90)
        assert len(fused) == 1
        # minimum-gap assignment pairs the later PET (2 days vs 9 days)
        assert fused[0].date == day("2011-03-12")

    def test_label_comes_from_pet(self):
        s = subject_with(
            mri=["2011-03-01"],
            pet=["2011-04-15"],
            dx=[("2011-03-01", "Healthy"), ("2011-04-15", "AD")],
        )
        labeled = pair_sessions_with_diagnosis(s)
        fused = pair_modalities(s, labeled, max_gap_days=90)
        assert fused[0].label == "AD"

    def test_pairing_count_bounded(self):
        s = subject_with(
            mri=["2011-01-01", "2011-02-01"],
            pet=["2011-01-05", "2011-02-05", "2011-03-05"],
            dx=[("2011-01-01", "AD"), ("2011-02-01", "AD"), ("2011-03-01", "AD")],
        )
        labeled = pair_sessions_with_diagnosis(s)
        fused = pair_modalities(s, labeled, max_gap_days=90)
        assert len(fused) <= min(2, 3)


class TestManifestJSON:
    def test_roundtrip(self, tmp_path):
        s = SubjectRecord(
            subject_id="sA",
            mri_sessions=[MriSession(day("2011-01-01"), path="sA/mri_2011-01-01.nii.gz")],
            pet_sessions=[
                PetSession(day("2011-01-05"), frame_paths=("sA/f0.nii.gz", "sA/f1.nii.gz"))
            ],
            diagnoses=[Diagnosis(day("2011-01-02"), "AD")],
        )
        manifest = Manifest(subjects=[s], provenance="unit test")
        path = tmp_path / "manifest.json"
        save_manifest(manifest, path)
        back = load_manifest(path)
        assert back.provenance == "unit test"
        assert back.subjects[0].subject_id == "sA"
        assert back.subjects[0].mri_sessions[0].path == "sA/mri_2011-01-01.nii.gz"
        assert back.subjects[0].pet_sessions[0].frame_paths == (
            "sA/f0.nii.gz",
            "sA/f1.nii.gz",
        )
        assert back.subjects[0].diagnoses[0].label == "AD"

    def test_duplicate_ids_rejected(self):
        a = subject_with(mri=["2011-01-01"], dx=[("2011-01-01", "AD")], sid="x")
        b = subject_with(mri=["2011-02-01"], dx=[("2011-02-01", "AD")], sid="x")
        with pytest.raises(ValueError):
            Manifest(subjects=[a, b])

    def test_duplicate_session_dates_rejected(self):
        with pytest.raises(ValueError):
            subject_with(mri=["2011-01-01", "2011-01-01"], dx=[("2011-01-01", "AD")])
