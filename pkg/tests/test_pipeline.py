"""Subject-level preprocessing: masking, normalization, end-to-end integrity."""

import numpy as np
import pytest

from neurofuse.biasfield import BiasFieldParams, NonPositiveIntensity
from neurofuse.phantom import PhantomConfig, generate_cohort
from neurofuse.pipeline import (
    Diagnosis,
    EmptyCerebellumReference,
    MriSession,
    PipelineAssets,
    SubjectRecord,
    apply_mask,
    normalize_pet_reference,
    preprocess_subject,
)
from neurofuse.register import RegistrationOptions
from neurofuse.volio import GridMismatch, Volume3D

from pipeline_checks import run_subject_checks

FAST_BIAS = BiasFieldParams(control_spacing=40.0, levels=3, iterations=30)


class TestApplyMask:
    def test_all_ones_unchanged(self):
        rng = np.random.default_rng(0)
        vol = Volume3D.from_array(rng.random((6, 6, 6), dtype=np.float32))
        mask = vol.with_data(np.ones((6, 6, 6)))
        np.testing.assert_array_equal(apply_mask(vol, mask).data, vol.data)

    def test_all_zeros(self):
        vol = Volume3D.from_array(np.ones((6, 6, 6), np.float32))
        mask = vol.with_data(np.zeros((6, 6, 6)))
        assert np.all(apply_mask(vol, mask).data == 0.0)

    def test_half_space_exact(self):
        rng = np.random.default_rng(1)
        vol = Volume3D.from_array(rng.random((6, 6, 6), dtype=np.float32))
        m = np.zeros((6, 6, 6), np.float32)
        m[:3] = 1.0
        out = apply_mask(vol, vol.with_data(m))
        assert np.all(out.data[3:] == 0.0)
        assert np.array_equal(out.data[:3], vol.data[:3])

    def test_grid_mismatch(self):
        vol = Volume3D.from_array(np.ones((6, 6, 6), np.float32))
        other = Volume3D.from_array(np.ones((6, 6, 6), np.float32), spacing=(2, 2, 2))
        with pytest.raises(GridMismatch):
            apply_mask(vol, other)


class TestNormalizePet:
    def test_uniform_volume(self):
        vol = Volume3D.from_array(np.full((5, 5, 5), 2.0, np.float32))
        mask = vol.with_data(np.ones((5, 5, 5)))
        out, scale = normalize_pet_reference(vol, mask)
        assert scale == pytest.approx(2.0)
        np.testing.assert_allclose(out.data, 1.0, atol=1e-6)

    def test_two_region_arithmetic(self):
        # cortex 2.22, cerebellum 2.0 -> cortex lands on the 1.11 boundary
        data = np.full((6, 6, 6), 2.22, np.float32)
        data[:, :, :2] = 2.0
        mask = np.zeros((6, 6, 6), np.float32)
        mask[:, :, :2] = 1.0
        vol = Volume3D.from_array(data)
        out, scale = normalize_pet_reference(vol, vol.with_data(mask))
        assert scale == pytest.approx(2.0, abs=1e-6)
        assert out.data[3, 3, 4] == pytest.approx(1.11, abs=1e-6)
        sel = mask > 0.5
        assert float(out.data[sel].mean()) == pytest.approx(1.0, abs=1e-6)

    def test_zero_reference_rejected(self):
        vol = Volume3D.from_array(np.zeros((5, 5, 5), np.float32))
        mask = vol.with_data(np.ones((5, 5, 5)))
        with pytest.raises(EmptyCerebellumReference):
            normalize_pet_reference(vol, mask)

    def test_empty_mask_rejected(self):
        vol = Volume3D.from_array(np.ones((5, 5, 5), np.float32))
        mask = vol.with_data(np.zeros((5, 5, 5)))
        with pytest.raises(EmptyCerebellumReference):
            normalize_pet_reference(vol, mask)


class TestAssets:
    def test_grid_mismatch_rejected(self):
        a = Volume3D.from_array(np.ones((8, 8, 8), np.float32))
        b = Volume3D.from_array(np.ones((8, 8, 9), np.float32))
        with pytest.raises(GridMismatch):
            PipelineAssets(a, a.with_data(np.ones((8, 8, 8))), b)

    def test_non_binary_mask_rejected(self):
        a = Volume3D.from_array(np.ones((8, 8, 8), np.float32))
        with pytest.raises(ValueError):
            PipelineAssets(a, a.with_data(0.5 * np.ones((8, 8, 8))), a.with_data(np.ones((8, 8, 8))))

    def test_directory_roundtrip(self, tmp_path):
        cohort = generate_cohort(PhantomConfig(n_subjects=1, seed=3), out_dir=tmp_path)
        loaded = PipelineAssets.from_directory(tmp_path / "assets")
        np.testing.assert_array_equal(
            loaded.brain_mask.data, cohort.assets.brain_mask.data
        )


@pytest.fixture(scope="module")
def small_cohort():
    cfg = PhantomConfig(
        n_subjects=2,
        n_mri=2,
        m_pet=1,
        jitter_rot_deg=5.0,
        jitter_trans_vox=2.0,
        bias_amplitude=0.2,
        frame_motion_vox=1.0,
        noise_sigma=0.01,
        seed=11,
    )
    return generate_cohort(cfg)


@pytest.fixture(scope="module")
def subject0_checks(small_cohort):
    return run_subject_checks(small_cohort, 0, bias_params=FAST_BIAS)


class TestPreprocessSubject:
    def test_degenerate_single_mri(self):
        cohort = generate_cohort(PhantomConfig(n_subjects=1, n_mri=1, m_pet=0, seed=5))
        subject = cohort.manifest.subjects[0]
        mri_out, pet_out, report = preprocess_subject(
            subject, cohort.assets, bias_params=FAST_BIAS
        )
        assert len(mri_out) == 1 and len(pet_out) == 0
        assert len(report.outputs) == 1
        assert mri_out[0].grid.same_grid(cohort.assets.mni_template.grid)

    def test_full_subject_end_to_end(self, subject0_checks):
        checks = subject0_checks
        assert checks["n_mri"] == 2
        assert checks["n_pet"] == 1
        assert checks["on_grid"]
        assert checks["masked_ok"]
        assert checks["fiducial_disp_vox"] <= 1.0, checks["fiducial_disp_vox"]
        assert checks["rederived_ok"]

    def test_outputs_ordered_by_date(self, small_cohort):
        subject = small_cohort.manifest.subjects[1]
        shuffled = SubjectRecord(
            subject_id=subject.subject_id,
            mri_sessions=list(reversed(subject.mri_sessions)),
            pet_sessions=subject.pet_sessions,
            diagnoses=subject.diagnoses,
        )
        _, _, report = preprocess_subject(
            shuffled, small_cohort.assets, bias_params=FAST_BIAS
        )
        mri_dates = [r.date for r in report.outputs if r.modality == "mri"]
        assert mri_dates == sorted(mri_dates)

    def test_pet_scale_recorded(self, subject0_checks):
        pet_records = [r for r in subject0_checks["report"].outputs if r.modality == "pet"]
        assert len(pet_records) == 1
        assert all(r.scale is not None and r.scale > 0 for r in pet_records)

    def test_errors_annotated_with_subject_and_date(self, small_cohort):
        subject = small_cohort.manifest.subjects[0]
        bad_vol = subject.mri_sessions[0].volume
        bad = SubjectRecord(
            subject_id="subBAD",
            mri_sessions=[
                MriSession(
                    date=subject.mri_sessions[0].date,
                    volume=bad_vol.with_data(np.where(bad_vol.data > 0, -1.0, 0.0)),
                )
            ],
            diagnoses=[Diagnosis(subject.mri_sessions[0].date, "AD")],
        )
        with pytest.raises(NonPositiveIntensity, match="subBAD"):
            preprocess_subject(bad, small_cohort.assets, bias_params=FAST_BIAS)

    def test_no_mri_rejected(self, small_cohort):
        empty = SubjectRecord(subject_id="subEMPTY")
        with pytest.raises(ValueError):
            preprocess_subject(empty, small_cohort.assets)

    def test_report_serializes_to_json(self, subject0_checks):
        import json

        payload = json.dumps(subject0_checks["report"].to_dict())
        assert "transform_to_mni" in payload
