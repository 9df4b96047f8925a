import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from sat2rad import data as data_mod
from sat2rad.checkpoint import load_checkpoint, save_checkpoint
from sat2rad.cli import EXIT_CONFIGURATION, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from sat2rad.config import RunConfig
from sat2rad.metrics import VIL_THRESHOLDS
from sat2rad.plotting import radar_levels
from sat2rad.wtformer import build_wtformer


def tiny_yaml(tmp_path, **run_overrides) -> Path:
    cfg = {
        "data": {
            "n_events": 6,
            "height": 16,
            "width": 16,
            "seed": 0,
            "split_fractions": [1.0, 0.0, 0.0],
        },
        "model": {"widths": [4, 8], "heads": 2, "window": 4},
        "diffusion": {
            "widths": [8, 16],
            "cond_width": 8,
            "t_steps": 50,
            "sampler_steps": 10,
        },
        "run": {"seed": 0, "steps": 6, "batch_size": 4, "lr": 1e-3, **run_overrides},
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*argv) -> int:
    return main([str(a) for a in argv])


# -- make-data --------------------------------------------------------------------


def test_make_data_writes_archive_and_stats(tmp_path, capsys):
    cfg = tiny_yaml(tmp_path)
    out = tmp_path / "events.h5"
    assert run("make-data", "--config", cfg, "--out", out, "--n", 8) == EXIT_OK
    assert out.exists()
    captured = capsys.readouterr().out
    assert "pixels >= 219" in captured
    count_219 = int(captured.rsplit("pixels >= 219:", 1)[1].split()[0])
    assert count_219 > 0
    assert (tmp_path / "config.snapshot.yaml").exists()


def test_make_data_deterministic_bytes(tmp_path):
    cfg = tiny_yaml(tmp_path)
    out1, out2 = tmp_path / "a.h5", tmp_path / "b.h5"
    assert run("make-data", "--config", cfg, "--out", out1) == EXIT_OK
    assert run("make-data", "--config", cfg, "--out", out2) == EXIT_OK
    assert sha(out1) == sha(out2)


def test_make_data_zero_events_is_validation_error(tmp_path):
    cfg = tiny_yaml(tmp_path)
    assert run("make-data", "--config", cfg, "--out", tmp_path / "x.h5", "--n", 0) == EXIT_VALIDATION


# -- train -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One CLI-driven pipeline shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = tiny_yaml(root)
    archive = root / "events.h5"
    ck = root / "ckpt"
    assert run("make-data", "--config", cfg, "--out", archive) == EXIT_OK
    assert run("train", "--config", cfg, "--stage", 1, "--data", archive, "--out", ck) == EXIT_OK
    assert (
        run(
            "train", "--config", cfg, "--stage", 2, "--data", archive,
            "--out", ck, "--stage1", ck / "stage1.h5",
        )
        == EXIT_OK
    )
    return {"root": root, "cfg": cfg, "archive": archive, "ck": ck}


def test_train_outputs_exist(trained):
    ck = trained["ck"]
    for name in ("stage1.h5", "stage2.h5", "stage1_log.jsonl", "stage2_log.jsonl",
                 "config.snapshot.yaml"):
        assert (ck / name).exists()
    rows = [json.loads(line) for line in (ck / "stage1_log.jsonl").read_text().splitlines()]
    assert len(rows) == 6
    assert {"step", "loss", "tag", "p_t"} <= set(rows[0])


def test_train_rerun_is_bitwise_identical(trained, tmp_path):
    cfg = trained["cfg"]
    ck2 = tmp_path / "ckpt2"
    assert run("train", "--config", cfg, "--stage", 1, "--data", trained["archive"], "--out", ck2) == EXIT_OK
    assert sha(ck2 / "stage1_log.jsonl") == sha(trained["ck"] / "stage1_log.jsonl")
    assert sha(ck2 / "stage1.h5") == sha(trained["ck"] / "stage1.h5")


def test_train_stage2_without_stage1_checkpoint(tmp_path):
    cfg = tiny_yaml(tmp_path)
    archive = tmp_path / "events.h5"
    assert run("make-data", "--config", cfg, "--out", archive) == EXIT_OK
    code = run("train", "--config", cfg, "--stage", 2, "--data", archive,
               "--out", tmp_path / "ck")
    assert code == EXIT_CONFIGURATION


# -- retrieve ------------------------------------------------------------------------


def test_retrieve_coarse_matches_direct_forward(trained, tmp_path):
    out = tmp_path / "coarse"
    assert (
        run(
            "retrieve", "--stage1", trained["ck"] / "stage1.h5",
            "--input", trained["archive"], "--out", out, "--coarse-only",
        )
        == EXIT_OK
    )
    state, cfg_dict, _ = load_checkpoint(trained["ck"] / "stage1.h5", "stage1")
    cfg = RunConfig.from_dict(cfg_dict)
    model = build_wtformer(cfg)
    model.load_state_dict(state)
    model.eval()
    records = data_mod.load_archive(trained["archive"])
    for rec in records:
        norm = data_mod.normalize(rec)
        x, _ = data_mod.to_tensors([norm])
        with torch.no_grad():
            mu = model(x)[0].numpy().astype(np.float32)
        stored = data_mod.load_tensor(out / f"{rec.event_id}.st")
        np.testing.assert_array_equal(stored, mu)


def test_retrieve_refined_range_and_reproducibility(trained, tmp_path):
    args = (
        "retrieve", "--stage1", trained["ck"] / "stage1.h5",
        "--stage2", trained["ck"] / "stage2.h5",
        "--input", trained["archive"],
    )
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run(*args, "--out", out1) == EXIT_OK
    assert run(*args, "--out", out2) == EXIT_OK
    files = sorted(out1.glob("*.st"))
    assert files
    for f in files:
        pred = data_mod.load_tensor(f)
        assert pred.min() >= 0.0 and pred.max() <= 1.0
        assert sha(f) == sha(out2 / f.name)


def test_retrieve_refined_needs_stage2(trained, tmp_path):
    code = run(
        "retrieve", "--stage1", trained["ck"] / "stage1.h5",
        "--input", trained["archive"], "--out", tmp_path / "x",
    )
    assert code == EXIT_CONFIGURATION


# -- evaluate ------------------------------------------------------------------------


def test_evaluate_perfect_predictions(trained, tmp_path, capsys):
    records = data_mod.load_archive(trained["archive"])
    pred_dir = tmp_path / "perfect"
    for rec in records:
        data_mod.save_tensor(
            pred_dir / f"{rec.event_id}.st",
            (rec.target[None] / 255.0).astype(np.float32),
        )
    out = tmp_path / "report"
    assert run("evaluate", "--pred", pred_dir, "--target", trained["archive"], "--out", out) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    for value in rep["csi"].values():
        assert value is None or value == 1.0
    assert rep["ssim"] == pytest.approx(1.0, abs=1e-9)
    assert (out / "report.csv").exists()
    assert (out / "scores.png").exists() and (out / "scores.png").stat().st_size > 0


def test_evaluate_matches_library_recomputation(trained, tmp_path):
    pred_dir = tmp_path / "preds"
    records = data_mod.load_archive(trained["archive"])
    rng = np.random.default_rng(0)
    for rec in records:
        noisy = np.clip(rec.target + rng.normal(0, 20, rec.target.shape), 0, 255)
        data_mod.save_tensor(pred_dir / f"{rec.event_id}.st", (noisy[None] / 255.0).astype(np.float32))
    out = tmp_path / "report"
    assert run("evaluate", "--pred", pred_dir, "--target", trained["archive"], "--out", out, "--no-plots") == EXIT_OK
    rep = json.loads((out / "report.json").read_text())

    from sat2rad.metrics import report as lib_report

    preds = [data_mod.load_tensor(pred_dir / f"{r.event_id}.st")[0] * 255.0 for r in records]
    targets = [r.target for r in records]
    expected = lib_report(preds, targets, VIL_THRESHOLDS)
    assert rep["avg_csi"] == pytest.approx(expected.avg_csi)
    assert rep["ssim"] == pytest.approx(expected.ssim)


def test_evaluate_missing_prediction_names_event(trained, tmp_path, capsys):
    pred_dir = tmp_path / "incomplete"
    records = data_mod.load_archive(trained["archive"])
    for rec in records[1:]:
        data_mod.save_tensor(pred_dir / f"{rec.event_id}.st", (rec.target[None] / 255.0).astype(np.float32))
    code = run("evaluate", "--pred", pred_dir, "--target", trained["archive"], "--out", tmp_path / "rep")
    assert code == EXIT_IO
    assert records[0].event_id in capsys.readouterr().err


# -- plot ----------------------------------------------------------------------------


def test_plot_panels_per_event(trained, tmp_path):
    out = tmp_path / "figs"
    records = data_mod.load_archive(trained["archive"])
    ids = [records[0].event_id, records[1].event_id]
    assert run("plot", "--input", trained["archive"], "--events", *ids, "--out", out) == EXIT_OK
    for event_id in ids:
        png = out / f"{event_id}.png"
        assert png.exists() and png.stat().st_size > 0


def test_plot_deterministic_bytes(trained, tmp_path):
    out1, out2 = tmp_path / "f1", tmp_path / "f2"
    records = data_mod.load_archive(trained["archive"])
    eid = records[0].event_id
    assert run("plot", "--input", trained["archive"], "--events", eid, "--out", out1) == EXIT_OK
    assert run("plot", "--input", trained["archive"], "--events", eid, "--out", out2) == EXIT_OK
    assert sha(out1 / f"{eid}.png") == sha(out2 / f"{eid}.png")


def test_plot_report_mode(trained, tmp_path):
    records = data_mod.load_archive(trained["archive"])
    pred_dir = tmp_path / "p"
    for rec in records:
        data_mod.save_tensor(pred_dir / f"{rec.event_id}.st", (rec.target[None] / 255.0).astype(np.float32))
    rep_dir = tmp_path / "rep"
    assert run("evaluate", "--pred", pred_dir, "--target", trained["archive"], "--out", rep_dir, "--no-plots") == EXIT_OK
    out = tmp_path / "figs"
    assert run("plot", "--report", rep_dir / "report.json", "--out", out) == EXIT_OK
    assert (out / "scores.png").stat().st_size > 0


def test_plot_nothing_requested(tmp_path):
    assert run("plot", "--out", tmp_path / "x") == EXIT_VALIDATION


def test_colormap_levels_at_thresholds():
    assert radar_levels(VIL_THRESHOLDS) == [0.0, 74.0, 133.0, 160.0, 181.0, 219.0, 255.0]


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, tiny_cfg):
    torch.manual_seed(0)
    model = build_wtformer(tiny_cfg)
    path = tmp_path / "ck.h5"
    save_checkpoint(path, "stage1", model, tiny_cfg.to_dict(), 17)
    state, cfg_dict, step = load_checkpoint(path, "stage1")
    assert step == 17
    assert cfg_dict["model"]["widths"] == list(tiny_cfg.model.widths)
    rebuilt = build_wtformer(RunConfig.from_dict(cfg_dict))
    rebuilt.load_state_dict(state)
    for (na, pa), (nb, pb) in zip(
        model.state_dict().items(), rebuilt.state_dict().items()
    ):
        assert na == nb
        np.testing.assert_array_equal(pa.numpy(), pb.numpy())


def test_checkpoint_section_mismatch(tmp_path, tiny_cfg):
    model = build_wtformer(tiny_cfg)
    path = tmp_path / "ck.h5"
    save_checkpoint(path, "stage1", model, tiny_cfg.to_dict(), 1)
    from sat2rad.errors import ConfigurationError

    with pytest.raises(ConfigurationError):
        load_checkpoint(path, "stage2")


def test_config_overrides_and_snapshot(tmp_path):
    cfg = RunConfig()
    cfg.apply_overrides(["model.widths=16,32", "run.lr=0.005", "diffusion.residual=true"])
    assert cfg.model.widths == (16, 32)
    assert cfg.run.lr == 0.005
    assert cfg.diffusion.residual is True
    snap = cfg.snapshot(tmp_path)
    loaded = RunConfig.from_yaml(snap)
    assert loaded.to_dict() == cfg.to_dict()

    from sat2rad.errors import ConfigurationError

    with pytest.raises(ConfigurationError):
        cfg.apply_overrides(["nope.key=1"])
    with pytest.raises(ConfigurationError):
        cfg.apply_overrides(["run.lr=fast"])
