"""Command-line entry point tying the pipeline into reproducible runs.

Artifacts land under <out_root>/<command>-seed<seed>/ with no timestamps, so
identical (command, config) invocations produce byte-identical trees. Torch
is imported lazily inside the commands that need it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, seed_for

PROMPTS = [
    "shift the palette toward dusk",
    "give the scene a warm sunset cast",
    "mute the colors to pastel tones",
    "apply a cool moonlit grade",
    "tint the scene with teal shadows",
    "make the colors vivid and saturated",
    "wash the scene in amber light",
    "grade the image toward cold steel blue",
]


def _edit_presets():
    from .synth_world import EditSpec, identity_edit

    return {
        "cool-shift": EditSpec(
            kind="global_linear_color",
            color_matrix=((0.7, 0.0, 0.0), (0.0, 0.85, 0.0), (0.0, 0.0, 0.6)),
            color_offset=(0.0, 0.05, 0.35),
        ),
        "warm-shift": EditSpec(
            kind="global_linear_color",
            color_matrix=((0.65, 0.0, 0.0), (0.0, 0.8, 0.0), (0.0, 0.0, 0.8)),
            color_offset=(0.3, 0.1, 0.0),
        ),
        "identity": identity_edit(),
    }


def _out_dir(cfg: RunConfig, command: str) -> Path:
    path = Path(cfg.out_root) / f"{command}-seed{cfg.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _backbone_config(cfg: RunConfig):
    from .dit_backbone import BackboneConfig

    b = cfg.backbone
    return BackboneConfig(
        d_model=b.d_model,
        n_layers=b.n_layers,
        n_heads=b.n_heads,
        patch_size=b.patch_size,
        max_frames=b.max_frames,
        max_grid=b.max_grid,
    )


def _save_model(path: Path, model, kind: str) -> None:
    from .dit_backbone import save_checkpoint

    meta = {"kind": kind, "backbone": dataclasses.asdict(model.config)}
    save_checkpoint(path, dict(model.state_dict()), meta)


def _load_model(path: Path):
    from .dit_backbone import BackboneConfig, DitBackbone, load_checkpoint

    state, meta = load_checkpoint(path)
    model = DitBackbone(BackboneConfig(**meta["backbone"]))
    model.load_state_dict(state)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_curate(cfg: RunConfig, args) -> int:
    from . import embed_filter

    cur = cfg.curation
    if args.tau_noedit is not None:
        cur.tau_noedit = args.tau_noedit
    if args.tau_mv is not None:
        cur.tau_mv = args.tau_mv
    if args.n_samples is not None:
        cur.n_samples = args.n_samples
    if args.embedder is not None:
        cur.embedder = args.embedder
    if args.editor is not None:
        cur.editor = args.editor

    if cur.embedder == "toy":
        embedder = embed_filter.ToyEmbedder(
            seed=seed_for(cfg.seed, "curate/embedder"), dimension=cur.embed_dim
        )
    else:
        raise ValueError("the external embedder is an integration point and is not bundled")
    if cur.editor == "synthetic":
        editor = embed_filter.SyntheticEditor(seed=seed_for(cfg.seed, "curate/editor"))
    elif cur.editor == "identity":
        editor = embed_filter.IdentityEditor()
    else:
        raise ValueError("the external editor is an integration point and is not bundled")

    corpus = embed_filter.make_curation_corpus(
        seed=cfg.seed,
        n_scenes=cur.n_scenes,
        views_per_scene=cur.views_per_scene,
        image_size=(cur.image_size, cur.image_size),
        n_objects=cur.n_objects,
    )
    out = _out_dir(cfg, "curate")
    manifest = embed_filter.curate(
        corpus=corpus,
        editor=editor,
        prompts=PROMPTS,
        thresholds=embed_filter.FilterThresholds(cur.tau_noedit, cur.tau_mv),
        embedder=embedder,
        seed=cfg.seed,
        n_samples=cur.n_samples,
        out_dir=out,
    )
    print(f"curate: {manifest.stats} -> {out / 'manifest.jsonl'}")
    return 0


def cmd_train_completion(cfg: RunConfig, args) -> int:
    from .completion_model import CompletionTrainConfig, train_completion

    tr = cfg.completion_train
    train_cfg = CompletionTrainConfig(
        n_scenes=tr.n_scenes,
        n_frames=tr.n_frames,
        image_size=(tr.image_size, tr.image_size),
        n_objects=tr.n_objects,
        patch_size=cfg.backbone.patch_size,
        backbone=_backbone_config(cfg),
        steps=args.steps if args.steps is not None else tr.steps,
        learning_rate=args.learning_rate if args.learning_rate is not None else tr.learning_rate,
        lr_schedule=tr.lr_schedule,
        warmup_steps=tr.warmup_steps,
        batch_size=tr.batch_size,
        seed=cfg.seed,
        min_window=tr.min_window,
        max_window=tr.max_window,
        full_sequence_every=tr.full_sequence_every,
        identity_probability=tr.identity_probability,
        full_single_ref_probability=tr.full_single_ref_probability,
    )
    out = _out_dir(cfg, "train-completion")
    model, history = train_completion(train_cfg, log_every=args.log_every)
    _save_model(out / "checkpoint.bin", model, kind="completion")
    _write_json(out / "history.json", history)
    _write_json(out / "config.json", cfg.to_dict())
    print(f"train-completion: final loss {history[-1]:.5f} -> {out / 'checkpoint.bin'}")
    return 0


def cmd_train_editor(cfg: RunConfig, args) -> int:
    from .dit_backbone import LoraConfig, save_lora
    from .referring_editor import ReferringTrainConfig, train_referring

    tr = cfg.referring_train
    train_cfg = ReferringTrainConfig(
        image_size=(cfg.completion_train.image_size, cfg.completion_train.image_size),
        n_scenes=tr.n_scenes,
        views_per_scene=tr.views_per_scene,
        n_examples=tr.n_examples,
        backbone=_backbone_config(cfg),
        base_steps=args.base_steps if args.base_steps is not None else tr.base_steps,
        base_learning_rate=tr.base_learning_rate,
        lora=LoraConfig(rank=tr.lora_rank, dropout=tr.lora_dropout),
        steps=args.steps if args.steps is not None else tr.steps,
        learning_rate=args.learning_rate if args.learning_rate is not None else tr.learning_rate,
        lr_schedule=tr.lr_schedule,
        warmup_steps=tr.warmup_steps,
        batch_size=tr.batch_size,
        identity_rate=tr.identity_rate,
        seed=cfg.seed,
    )
    out = _out_dir(cfg, "train-editor")
    base, adapter, _, history = train_referring(train_cfg, log_every=args.log_every)
    _save_model(out / "base.bin", base, kind="editor-base")
    save_lora(out / "adapter.bin", adapter, out / "base.bin")
    _write_json(out / "history.json", history)
    _write_json(out / "config.json", cfg.to_dict())
    print(f"train-editor: final loss {history[-1]:.5f} -> {out / 'adapter.bin'}")
    return 0


def _build_job(cfg: RunConfig, args):
    from .completion_model import make_trajectory
    from .edit_orchestrator import EditJob
    from .synth_world import make_scene

    orch = cfg.orchestration
    mode = (args.mode or orch.mode).replace("-", "_")
    presets = _edit_presets()
    preset = args.edit or orch.edit_preset
    if preset not in presets:
        raise ValueError(f"unknown edit preset {preset!r}; choose from {sorted(presets)}")
    size = (orch.image_size, orch.image_size)
    scene_seed = args.scene if args.scene is not None else seed_for(cfg.seed, "edit/scene")
    scene = make_scene(scene_seed, orch.n_objects, size)
    rng = np.random.default_rng(seed_for(cfg.seed, "edit/trajectory"))
    return EditJob(
        scene=scene,
        trajectory=make_trajectory(rng),
        n_frames=orch.n_frames,
        image_size=size,
        edit=presets[preset],
        mode=mode,
        k=args.k if args.k is not None else orch.k,
        window=args.window if args.window is not None else orch.window,
        seed=cfg.seed,
    )


def cmd_edit(cfg: RunConfig, args) -> int:
    from .edit_orchestrator import (
        MODE_FEW_SHOT,
        ModelCompleter,
        export_viewset,
        few_shot_edit,
        one_shot_edit,
        save_job,
    )

    job = _build_job(cfg, args)
    completer = ModelCompleter(_load_model(Path(args.ckpt)), n_steps=cfg.flow.n_steps)
    viewset = few_shot_edit(job, completer) if job.mode == MODE_FEW_SHOT else one_shot_edit(job, completer)
    out = _out_dir(cfg, "edit") / "viewset"
    export_viewset(viewset, out)
    save_job(job, out)
    print(f"edit: {job.mode} over {job.n_frames} frames -> {out}")
    return 0


def cmd_replace(cfg: RunConfig, args) -> int:
    from .edit_orchestrator import (
        MODE_FEW_SHOT,
        ModelCompleter,
        export_viewset,
        few_shot_edit,
        load_job,
        one_shot_edit,
        replace_views,
        save_job,
    )

    indices = [int(tok) for tok in args.frames.split(",") if tok.strip() != ""]
    job = load_job(Path(args.viewset))
    completer = ModelCompleter(_load_model(Path(args.ckpt)), n_steps=cfg.flow.n_steps)
    # Deterministic regeneration rebuilds the context the export cannot carry.
    viewset = few_shot_edit(job, completer) if job.mode == MODE_FEW_SHOT else one_shot_edit(job, completer)
    new_seed = args.new_seed if args.new_seed is not None else cfg.seed + 1
    replaced = replace_views(viewset, indices, new_seed)
    out = _out_dir(cfg, "replace") / "viewset"
    export_viewset(replaced, out)
    save_job(job, out)
    print(f"replace: frames {indices} regenerated with seed {new_seed} -> {out}")
    return 0


def cmd_reconstruct_video(cfg: RunConfig, args) -> int:
    import dataclasses as dc

    from .completion_model import complete
    from .edit_orchestrator import (
        PROV_GENERATED,
        PROV_REFERENCE,
        ViewSet,
        export_viewset,
        import_viewset,
    )
    from .metrics import MetricReport, psnr, ssim, write_reports
    from .synth_world import quantize_rgb

    source = import_viewset(Path(args.input))
    model = _load_model(Path(args.ckpt))
    depths = np.stack([f.depth for f in source.frames])
    ref = {0: source.frames[0].rgb}
    n_steps = args.steps if args.steps is not None else cfg.flow.n_steps
    frames = complete(model, depths, ref, n_steps, seed_for(cfg.seed, "reconstruct-video"))

    records = []
    for f in source.frames:
        rgb = f.rgb if f.frame_index == 0 else quantize_rgb(frames[f.frame_index])
        provenance = PROV_REFERENCE if f.frame_index == 0 else PROV_GENERATED
        records.append(dc.replace(f, rgb=rgb, provenance=provenance))
    out = _out_dir(cfg, "reconstruct-video") / "viewset"
    export_viewset(ViewSet(frames=records, depth_scale=source.depth_scale), out)

    psnrs = [psnr(r.rgb, s.rgb) for r, s in zip(records, source.frames)]
    ssims = [ssim(r.rgb, s.rgb) for r, s in zip(records, source.frames)]
    reports = [
        MetricReport.from_values("psnr", str(args.input), psnrs),
        MetricReport.from_values("ssim", str(args.input), ssims),
    ]
    write_reports(out.parent / "metrics.jsonl", reports)
    print(f"reconstruct-video: psnr {reports[0].mean:.2f} dB ssim {reports[1].mean:.3f} -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    from .edit_orchestrator import import_viewset
    from .embed_filter import ToyEmbedder
    from .metrics import MetricReport, psnr, set_consistency, ssim, write_reports

    candidate = import_viewset(Path(args.viewset))
    reference = import_viewset(Path(args.reference))
    if len(candidate) != len(reference):
        raise ValueError("viewsets have different lengths")
    psnrs = [psnr(c.rgb, r.rgb) for c, r in zip(candidate.frames, reference.frames)]
    ssims = [ssim(c.rgb, r.rgb) for c, r in zip(candidate.frames, reference.frames)]
    embedder = ToyEmbedder(seed=seed_for(cfg.seed, "eval/embedder"), dimension=cfg.curation.embed_dim)
    consistency = set_consistency([f.rgb for f in candidate.frames], embedder)
    reports = [
        MetricReport.from_values("psnr", str(args.viewset), psnrs),
        MetricReport.from_values("ssim", str(args.viewset), ssims),
        MetricReport.from_values("set_consistency", str(args.viewset), [consistency]),
    ]
    out = _out_dir(cfg, "eval")
    write_reports(out / "metrics.jsonl", reports)
    for rep in reports:
        print(f"eval {rep.metric}: mean {rep.mean:.4f} std {rep.std:.4f}")
    return 0


def cmd_selftest(cfg: RunConfig, args) -> int:
    failures = []
    for name, check in _selftest_checks():
        try:
            check()
            print(f"selftest ok   {name}")
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures.append(name)
            print(f"selftest FAIL {name}: {exc}")
    if failures:
        print(f"selftest: {len(failures)} failure(s)", file=sys.stderr)
        return 1
    print("selftest: all checks passed")
    return 0


def _selftest_checks():
    def commutation():
        from . import synth_world as sw

        edit = _edit_presets()["cool-shift"]
        for seed in (3, 11):
            scene = sw.make_scene(seed, 3, (32, 32))
            for tx in (-0.2, 0.15):
                pose = dataclasses.replace(sw.canonical_pose((32, 32)), translation=(tx, 0.0, 0.0))
                via_scene = sw.render_view(sw.apply_edit_scene(scene, edit), pose).rgb
                via_image = sw.apply_edit_image(sw.render_view(scene, pose).rgb, edit)
                assert np.max(np.abs(via_scene - via_image)) <= 1e-6

    def filter_rule():
        from .embed_filter import FilterThresholds, SampleScores, Verdict, filter_sample

        thresholds = FilterThresholds(0.95, 0.9)
        for s_noedit in np.linspace(-1, 1, 11):
            for s_mv in np.linspace(-1, 1, 11):
                scores = SampleScores(s_noedit, s_noedit, s_noedit, s_mv)
                expected = (
                    Verdict.DISCARD_NOEDIT
                    if s_noedit > 0.95
                    else Verdict.DISCARD_INCONSISTENT if s_mv < 0.9 else Verdict.KEEP
                )
                assert filter_sample(scores, thresholds) is expected

    def flow():
        import torch

        from .flow_core import euler_sample, interpolate

        x0 = torch.randn(4, 3, generator=torch.Generator().manual_seed(0))
        eps = torch.randn(4, 3, generator=torch.Generator().manual_seed(1))
        assert torch.equal(interpolate(x0, eps, 0.0), x0)
        assert torch.equal(interpolate(x0, eps, 1.0), eps)
        gen = torch.Generator().manual_seed(7)
        noise = torch.randn(4, 3, generator=gen)
        target = torch.randn(4, 3, generator=torch.Generator().manual_seed(2))
        out = euler_sample(lambda x, t, c: noise - target, (4, 3), None, 1, 7)
        assert torch.allclose(out, target, atol=1e-6)

    def conditioning():
        import torch

        from .completion_model import build_training_example
        from .dit_backbone import STREAM_LATENT, STREAM_REFERENCE, build_pe

        frames = np.random.default_rng(0).uniform(size=(4, 16, 16, 3)).astype(np.float32)
        depths = np.random.default_rng(1).uniform(1, 2, size=(4, 16, 16)).astype(np.float32)
        eps = torch.randn(frames.shape, generator=torch.Generator().manual_seed(3))
        ex = build_training_example(frames, depths, [0, 2], eps, 0.5, 4)
        assert len(ex.token_seq) == 4 * 16 + 4 * 16 + 2 * 16
        pe = build_pe(ex.token_seq.position_ids, 128, 32, 16)
        tags = ex.token_seq.stream_tags
        ids = ex.token_seq.position_ids
        ref_rows = pe[(tags == STREAM_REFERENCE) & (ids[:, 0] == 2)]
        lat_rows = pe[(tags == STREAM_LATENT) & (ids[:, 0] == 2)]
        assert torch.equal(ref_rows, lat_rows)

    def lora_identity():
        import torch

        from .dit_backbone import (
            BackboneConfig,
            DitBackbone,
            LoraAdapter,
            LoraConfig,
            apply_lora,
            patchify,
        )

        torch.manual_seed(0)
        cfg = BackboneConfig(d_model=32, n_layers=2, n_heads=2, patch_size=4, zero_init_gates=False)
        model = DitBackbone(cfg)
        model.eval()
        adapter = LoraAdapter.init_for(model, LoraConfig(rank=4), seed=1)
        adapted = apply_lora(model, adapter)
        adapted.eval()
        seq = patchify(np.random.default_rng(0).uniform(size=(1, 8, 8, 3)), 4, 0, loss_mask=True)
        with torch.no_grad():
            assert torch.equal(model(seq, 0.5), adapted(seq, 0.5))

    def export_roundtrip():
        import tempfile

        from .edit_orchestrator import (
            EditJob,
            export_viewset,
            few_shot_edit,
            import_viewset,
            viewsets_equal,
        )
        from .synth_world import Trajectory, make_scene

        class GroundTruthCompleter:
            def complete(self, depths, ref_views, frame_indices, seed):
                return np.stack([self.frames[i] for i in frame_indices])

        job = EditJob(
            scene=make_scene(5, 3, (32, 32)),
            trajectory=Trajectory((-0.2, 0, 0), (0.2, 0, 0)),
            n_frames=8,
            image_size=(32, 32),
            edit=_edit_presets()["identity"],
            mode="few_shot",
            k=2,
            window=4,
            seed=0,
        )
        from . import synth_world as sw

        stub = GroundTruthCompleter()
        stub.frames = [
            f.rgb for f in sw.render_orbit(job.scene, job.n_frames, job.trajectory, job.image_size)
        ]
        viewset = few_shot_edit(job, stub)
        with tempfile.TemporaryDirectory() as tmp:
            export_viewset(viewset, tmp)
            assert viewsets_equal(viewset, import_viewset(tmp))

    def metrics_basic():
        from .metrics import psnr

        a = np.zeros((8, 8, 3))
        assert psnr(a, a) == 99.0
        offset = np.full((8, 8, 3), 10.0 / 255.0)
        assert abs(psnr(a, a + offset) - 28.13) < 0.01

    return [
        ("edit/render commutation", commutation),
        ("filter decision rule", filter_rule),
        ("flow endpoints and euler", flow),
        ("conditioning layout", conditioning),
        ("lora zero-init identity", lora_identity),
        ("viewset export round-trip", export_roundtrip),
        ("psnr analytic", metrics_basic),
    ]


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tinker", description=__doc__)
    parser.add_argument("--config", type=str, default=None, help="path to a JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--out-root", type=str, default=None, help="artifact root override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="run the edit-pair curation pipeline")
    p.add_argument("--tau-noedit", type=float, default=None)
    p.add_argument("--tau-mv", type=float, default=None)
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--embedder", choices=["toy", "external"], default=None)
    p.add_argument("--editor", choices=["synthetic", "identity", "external"], default=None)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train-completion", help="train the scene-completion model")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_completion)

    p = sub.add_parser("train-editor", help="train the referring editor (LoRA)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--base-steps", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_editor)

    p = sub.add_parser("edit", help="run few-shot or one-shot edit propagation")
    p.add_argument("--mode", choices=["few-shot", "one-shot"], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--scene", type=int, default=None, help="scene seed")
    p.add_argument("--edit", type=str, default=None, help="edit preset name")
    p.add_argument("--ckpt", type=str, required=True, help="completion checkpoint")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("replace", help="regenerate selected frames of an exported viewset")
    p.add_argument("--viewset", type=str, required=True)
    p.add_argument("--frames", type=str, required=True, help="comma-separated frame indices")
    p.add_argument("--new-seed", type=int, default=None)
    p.add_argument("--ckpt", type=str, required=True)
    p.set_defaults(func=cmd_replace)

    p = sub.add_parser("reconstruct-video", help="rebuild frames from frame 0 plus depth")
    p.add_argument("--input", type=str, required=True, help="exported viewset directory")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_reconstruct_video)

    p = sub.add_parser("eval", help="score one viewset against another")
    p.add_argument("--viewset", type=str, required=True)
    p.add_argument("--reference", type=str, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the fast invariant suite")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out_root is not None:
            cfg.out_root = args.out_root
        return args.func(cfg, args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
