import numpy as np
import pytest

from segadapt.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from segadapt.core import RngStream
from segadapt.model import Checkpoint, init_bn_state, init_params, save_checkpoint

from helpers import tiny_config


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-bench")
    code = main(["gen-data", "--out", str(root), "--source-count", "5",
                 "--target-count", "5", "--val-count", "2",
                 "--set", "input_h=32", "--set", "input_w=32"])
    assert code == EXIT_OK
    return root


@pytest.fixture(scope="module")
def micro_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.cfg"
    path.write_text(tiny_config(pretrain_iters=2, adapt_iters=2, checkpoint_period=2).to_text())
    return path


def test_no_command_is_usage_error(capsys):
    assert main([]) == EXIT_USAGE


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE


def test_unknown_set_key_is_config_error(bench, capsys):
    code = main(["gen-data", "--out", str(bench), "--set", "not_a_key=1"])
    assert code == EXIT_CONFIG
    assert "not_a_key" in capsys.readouterr().err


def test_malformed_set_is_config_error(bench, capsys):
    code = main(["gen-data", "--out", str(bench), "--set", "zeta"])
    assert code == EXIT_CONFIG


def test_config_file_error_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("zeta = 0.75\noops = 1\n")
    code = main(["pretrain", "--config", str(cfg), "--data", str(tmp_path),
                 "--out", str(tmp_path / "out")])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line 2" in err and "oops" in err


def test_missing_config_file_is_config_error(tmp_path, capsys):
    code = main(["pretrain", "--config", str(tmp_path / "ghost.cfg"),
                 "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG


def test_missing_data_is_runtime_error(micro_cfg, tmp_path, capsys):
    code = main(["pretrain", "--config", str(micro_cfg),
                 "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")])
    assert code == EXIT_RUNTIME


def test_full_cli_flow(bench, micro_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(micro_cfg), "--data", str(bench),
                 "--out", str(out)]) == EXIT_OK
    captured = capsys.readouterr().out
    assert "checkpoint:" in captured

    assert main(["adapt", "--config", str(micro_cfg), "--data", str(bench),
                 "--out", str(out), "--pretrain", str(out / "pretrain.ckpt")]) == EXIT_OK
    captured = capsys.readouterr().out
    assert "chi/theta history" in captured

    assert main(["eval", "--checkpoint", str(out / "adapt_phi.ckpt"),
                 "--data", str(bench), "--out", str(out)]) == EXIT_OK
    captured = capsys.readouterr().out
    assert "miou:" in captured
    assert (out / "iou.csv").exists()


def test_list_ablations(capsys):
    assert main(["adapt", "--list-ablations"]) == EXIT_OK
    lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    assert len(lines) == 10
    assert any(l.startswith("ablation.no_momentum:") for l in lines)


def test_adapt_requires_run_arguments(capsys):
    code = main(["adapt", "--data", "x"])
    assert code == EXIT_USAGE


def test_inspect_threshold_value(tmp_path, capsys):
    code = main(["inspect", "--out", str(tmp_path),
                 "--set", "zeta=0.75", "--set", "beta=0.001"])
    assert code == EXIT_OK
    rows = (tmp_path / "threshold_curve.csv").read_text().splitlines()[1:]
    table = {float(r.split(",")[0]): float(r.split(",")[1]) for r in rows}
    assert abs(table[0.001] - 0.75 * (1.0 - np.exp(-1.0))) < 1e-12


def test_ablation_override_reaches_run(bench, micro_cfg, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["pretrain", "--config", str(micro_cfg), "--data", str(bench),
                 "--out", str(out)]) == EXIT_OK
    assert main(["adapt", "--config", str(micro_cfg), "--data", str(bench),
                 "--out", str(out), "--pretrain", str(out / "pretrain.ckpt"),
                 "--set", "ablation.no_momentum=true"]) == EXIT_OK
    # with gamma_psi = 0 and T = 1 both checkpoints hold identical parameters
    from segadapt.model import load_checkpoint
    phi = load_checkpoint(out / "adapt_phi.ckpt")
    psi = load_checkpoint(out / "adapt_psi.ckpt")
    assert np.array_equal(phi.params.flat, psi.params.flat)


def test_eval_on_oracle_fixture(tmp_path, capsys):
    from segadapt.databench import write_split
    from segadapt.imaging import write_pgm

    root = tmp_path / "data"
    write_split(root, "target_val", "target", [0], 32, 32)
    (root / "manifest.txt").write_text("target_val/images/00000.ppm target 0\n")
    write_pgm(root / "target_val/labels/00000.pgm", np.full((32, 32), 3, dtype=np.int64))

    params = init_params(6, RngStream(0).derive("m"))
    params.view("conv3_w")[...] = 0.0
    params.view("conv3_b")[...] = 0.0
    params.view("conv3_b")[3] = 4.0
    ckpt = tmp_path / "oracle.ckpt"
    save_checkpoint(ckpt, Checkpoint(params=params, bn=init_bn_state(),
                                     velocity=np.zeros(params.layout.total), iteration=0,
                                     num_classes=6, input_h=32, input_w=32,
                                     config_hash="fixture"))
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(root)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "miou: 1.0000" in out
