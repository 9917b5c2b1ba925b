import math

import numpy as np
import pytest

from tinker3d import edit_orchestrator as orch
from tinker3d import synth_world as sw


class GroundTruthCompleter:
    """Oracle stub: returns exact (optionally edited) renders and logs calls."""

    def __init__(self, frames, edit=None):
        rgb = [f.rgb for f in frames]
        if edit is not None:
            rgb = [sw.apply_edit_image(x, edit) for x in rgb]
        self.frames = [sw.quantize_rgb(x) for x in rgb]
        self.calls = []

    def complete(self, depths, ref_views, frame_indices, seed):
        self.calls.append({"frames": list(frame_indices), "refs": sorted(ref_views), "seed": seed})
        return np.stack([self.frames[i] for i in frame_indices])


class SeedColorCompleter:
    """Stub whose output depends on the seed; for replacement semantics."""

    def __init__(self, shape):
        self.shape = shape

    def complete(self, depths, ref_views, frame_indices, seed):
        rng = np.random.default_rng(seed)
        out = rng.uniform(size=(len(frame_indices), *self.shape)).astype(np.float32)
        return out


def make_job(mode="few_shot", n_frames=16, k=3, window=6, edit=None, seed=0):
    scene = sw.make_scene(5, 3, (32, 32))
    return orch.EditJob(
        scene=scene,
        trajectory=sw.Trajectory((-0.15, 0.0, 0.0), (0.15, 0.0, 0.0)),
        n_frames=n_frames,
        image_size=(32, 32),
        edit=edit if edit is not None else sw.identity_edit(),
        mode=mode,
        k=k,
        window=window,
        seed=seed,
    )


def gt_frames(job):
    return sw.render_orbit(job.scene, job.n_frames, job.trajectory, job.image_size)


class TestSpacing:
    def test_three_refs_sixteen_frames(self):
        assert orch.spaced_indices(16, 3) == [0, 8, 15]

    def test_two_refs(self):
        assert orch.spaced_indices(16, 2) == [0, 15]

    def test_single_ref(self):
        assert orch.spaced_indices(10, 1) == [0]


class TestWindowStarts:
    def test_exact_division(self):
        assert orch.window_starts(16, 6) == [0, 5, 10]

    def test_clamped_last_window(self):
        assert orch.window_starts(16, 7) == [0, 6, 9]

    def test_count_formula(self):
        for n in (8, 11, 16, 23):
            for w in (2, 3, 6, 7):
                if n < w:
                    continue
                starts = orch.window_starts(n, w)
                assert len(starts) == math.ceil((n - 1) / (w - 1))
                assert starts[-1] + w - 1 == n - 1


class TestFewShot:
    def test_references_bit_identical_with_provenance(self, cool_shift):
        job = make_job(edit=cool_shift)
        frames = gt_frames(job)
        stub = GroundTruthCompleter(frames, edit=cool_shift)
        viewset = orch.few_shot_edit(job, stub)
        assert len(viewset) == 16
        refs = orch.spaced_indices(16, 3)
        for idx in refs:
            expected = sw.quantize_rgb(sw.apply_edit_image(frames[idx].rgb, cool_shift))
            assert viewset.frames[idx].provenance == orch.PROV_REFERENCE
            assert np.array_equal(viewset.frames[idx].rgb, expected)
        for idx in set(range(16)) - set(refs):
            assert viewset.frames[idx].provenance == orch.PROV_GENERATED

    def test_one_completion_call_with_all_refs(self):
        job = make_job()
        stub = GroundTruthCompleter(gt_frames(job))
        orch.few_shot_edit(job, stub)
        assert len(stub.calls) == 1
        assert stub.calls[0]["refs"] == [0, 8, 15]
        assert stub.calls[0]["frames"] == list(range(16))

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            orch.few_shot_edit(make_job(k=4), GroundTruthCompleter(gt_frames(make_job())))

    def test_identity_edit_recovers_render(self):
        job = make_job()
        frames = gt_frames(job)
        viewset = orch.few_shot_edit(job, GroundTruthCompleter(frames))
        for f, gt in zip(viewset.frames, frames):
            assert np.array_equal(f.rgb, sw.quantize_rgb(gt.rgb))
            assert f.pose == gt.pose


class TestOneShot:
    def test_window_plan_and_call_count(self):
        job = make_job(mode="one_shot", window=6)
        stub = GroundTruthCompleter(gt_frames(job))
        orch.one_shot_edit(job, stub)
        assert [c["frames"] for c in stub.calls] == [
            list(range(0, 6)),
            list(range(5, 11)),
            list(range(10, 16)),
        ]
        assert len(stub.calls) == math.ceil((16 - 1) / (6 - 1))

    def test_nondivisible_termination(self):
        job = make_job(mode="one_shot", window=7)
        stub = GroundTruthCompleter(gt_frames(job))
        viewset = orch.one_shot_edit(job, stub)
        assert len(stub.calls) == math.ceil(15 / 6)
        assert [f.frame_index for f in viewset.frames] == list(range(16))

    def test_monotone_propagation(self):
        job = make_job(mode="one_shot", window=6)
        stub = GroundTruthCompleter(gt_frames(job))
        orch.one_shot_edit(job, stub)
        finalized = {0}
        for call in stub.calls:
            for ref in call["refs"]:
                # window-local reference 0 maps to the window's first frame
                assert call["frames"][ref] in finalized
            finalized.update(call["frames"])

    def test_coverage_and_frame0_reference(self):
        job = make_job(mode="one_shot")
        viewset = orch.one_shot_edit(job, GroundTruthCompleter(gt_frames(job)))
        assert viewset.frames[0].provenance == orch.PROV_REFERENCE
        assert all(f.provenance == orch.PROV_GENERATED for f in viewset.frames[1:])

    def test_mode_consistency_with_exact_stub(self):
        few = make_job(mode="few_shot")
        one = make_job(mode="one_shot")
        frames = gt_frames(few)
        vs_few = orch.few_shot_edit(few, GroundTruthCompleter(frames))
        vs_one = orch.one_shot_edit(one, GroundTruthCompleter(frames))
        for a, b in zip(vs_few.frames, vs_one.frames):
            assert np.array_equal(a.rgb, b.rgb)


class TestReplace:
    def test_empty_indices_noop(self):
        job = make_job(mode="one_shot")
        viewset = orch.one_shot_edit(job, GroundTruthCompleter(gt_frames(job)))
        replaced = orch.replace_views(viewset, [], seed=99)
        assert orch.viewsets_equal(viewset, replaced)

    def test_locality(self):
        job = make_job(mode="one_shot")
        viewset = orch.one_shot_edit(job, SeedColorCompleter((32, 32, 3)))
        replaced = orch.replace_views(viewset, [3], seed=1234)
        for f_old, f_new in zip(viewset.frames, replaced.frames):
            if f_old.frame_index == 3:
                assert f_new.provenance == orch.PROV_REPLACED
                assert not np.array_equal(f_old.rgb, f_new.rgb)
            else:
                assert np.array_equal(f_old.rgb, f_new.rgb)
                assert f_new.provenance == f_old.provenance

    def test_original_seed_reproduces_original(self):
        job = make_job(mode="one_shot", seed=7)
        viewset = orch.one_shot_edit(job, SeedColorCompleter((32, 32, 3)))
        replaced = orch.replace_views(viewset, [3, 8], seed=7)
        for f_old, f_new in zip(viewset.frames, replaced.frames):
            assert np.array_equal(f_old.rgb, f_new.rgb)

    def test_reference_frame_rejected(self):
        job = make_job(mode="few_shot")
        viewset = orch.few_shot_edit(job, GroundTruthCompleter(gt_frames(job)))
        with pytest.raises(ValueError):
            orch.replace_views(viewset, [0], seed=1)

    def test_imported_viewset_rejected(self, tmp_path):
        job = make_job(mode="few_shot")
        viewset = orch.few_shot_edit(job, GroundTruthCompleter(gt_frames(job)))
        orch.export_viewset(viewset, tmp_path)
        imported = orch.import_viewset(tmp_path)
        with pytest.raises(ValueError):
            orch.replace_views(imported, [1], seed=0)


class TestExportImport:
    def test_roundtrip_bit_exact(self, tmp_path, cool_shift):
        job = make_job(edit=cool_shift)
        viewset = orch.few_shot_edit(job, GroundTruthCompleter(gt_frames(job), edit=cool_shift))
        orch.export_viewset(viewset, tmp_path)
        assert orch.viewsets_equal(viewset, orch.import_viewset(tmp_path))

    def test_manifest_line_count(self, tmp_path):
        job = make_job()
        viewset = orch.few_shot_edit(job, GroundTruthCompleter(gt_frames(job)))
        orch.export_viewset(viewset, tmp_path)
        lines = (tmp_path / "manifest.jsonl").read_text().strip().splitlines()
        assert len(lines) == len(viewset) + 1

    def test_pose_matrix_identity_rotation(self, tmp_path):
        import json

        job = make_job()
        viewset = orch.few_shot_edit(job, GroundTruthCompleter(gt_frames(job)))
        orch.export_viewset(viewset, tmp_path)
        lines = (tmp_path / "manifest.jsonl").read_text().strip().splitlines()
        record = json.loads(lines[1])
        m = record["pose"]
        assert m[0] == m[5] == m[10] == m[15] == 1.0
        assert m[3] == viewset.frames[0].pose.translation[0]

    def test_depth_quantization_bound(self, tmp_path):
        job = make_job()
        frames = gt_frames(job)
        viewset = orch.few_shot_edit(job, GroundTruthCompleter(frames))
        for f, gt in zip(viewset.frames, frames):
            assert np.max(np.abs(f.depth - gt.depth)) <= viewset.depth_scale

    def test_job_roundtrip(self, tmp_path, cool_shift):
        job = make_job(mode="one_shot", edit=cool_shift, seed=11)
        orch.save_job(job, tmp_path)
        assert orch.load_job(tmp_path) == job


class TestValidation:
    def test_bad_jobs(self):
        with pytest.raises(ValueError):
            make_job(mode="both")
        with pytest.raises(ValueError):
            make_job(k=1)
        with pytest.raises(ValueError):
            make_job(window=1)
        with pytest.raises(ValueError):
            make_job(n_frames=4, window=6)

    def test_viewset_contiguity(self):
        job = make_job()
        viewset = orch.few_shot_edit(job, GroundTruthCompleter(gt_frames(job)))
        frames = viewset.frames[1:]
        with pytest.raises(ValueError):
            orch.ViewSet(frames=frames, depth_scale=viewset.depth_scale)
