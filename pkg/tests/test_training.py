import numpy as np
import pytest
import torch

from cephmark import cli
from cephmark.backbone import build_backbone, save_weights, tiny_test
from cephmark.data import DatasetSplit, generate_synthetic, read_annotation, write_dataset
from cephmark.errors import ConfigError, ContractError, NumericalError
from cephmark.training import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_train_config,
    predict,
    save_checkpoint,
    train,
)


def tiny_config(dataset_dir, checkpoint_dir, **overrides) -> TrainConfig:
    base = dict(
        dataset_dir=dataset_dir,
        checkpoint_dir=checkpoint_dir,
        backbone="tiny_test",
        n_landmarks=2,
        radius=8,
        epochs=2,
        batch_size=1,
        seed=3,
        network_height=64,
        network_width=64,
        fused_channels=8,
        lateral_channels=4,
        attn_hidden=8,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture()
def tiny_dataset(tmp_path):
    samples = generate_synthetic(count=5, extent=(64, 64), n_landmarks=2, seed=11, min_separation=12.0)
    root = tmp_path / "ds"
    split = DatasetSplit(train=("0000", "0001", "0002"), validate=("0003",), test=("0004",))
    write_dataset(samples, root, split=split)
    return root


def test_zero_epochs_rejected(tmp_path):
    cfg = tiny_config(tmp_path, tmp_path / "ckpt", epochs=0)
    with pytest.raises(ConfigError):
        train(cfg)


def test_bad_alpha_and_optimizer_rejected(tmp_path):
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, tmp_path, alpha=1.5).validate()
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, tmp_path, optimizer="sgd").validate()
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, tmp_path, radius=4).validate()  # below the max tap stride
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, tmp_path, network_height=48).validate()  # not a multiple of 32


def test_train_and_checkpoint_roundtrip(tiny_dataset, tmp_path):
    ckpt_dir = tmp_path / "ckpt"
    cfg = tiny_config(tiny_dataset, ckpt_dir)
    manifest = train(cfg)
    assert manifest.epoch >= 1
    assert manifest.val_mre_mm >= 0.0
    assert manifest.config_digest == cfg.digest()
    assert (ckpt_dir / "best.npz").is_file()
    history = (ckpt_dir / "history.csv").read_text().strip().splitlines()
    assert history[0] == "epoch,train_loss,val_mre_mm"
    assert len(history) == 1 + cfg.epochs

    net, loaded_cfg, loaded_manifest = load_checkpoint(ckpt_dir / "best.npz")
    assert loaded_cfg.digest() == cfg.digest()
    assert loaded_manifest.params_digest == manifest.params_digest
    # a second save of the loaded net reproduces the same parameter digest
    m2 = save_checkpoint(tmp_path / "again.npz", net, loaded_cfg, 1, 0.0, manifest.val_mre_mm)
    assert m2.params_digest == manifest.params_digest


def test_train_with_batches(tiny_dataset, tmp_path):
    ckpt_dir = tmp_path / "ckpt"
    cfg = tiny_config(tiny_dataset, ckpt_dir, epochs=1, batch_size=2)
    manifest = train(cfg)
    assert (ckpt_dir / "best.npz").is_file()
    assert manifest.epoch == 1


def test_evaluate_matches_in_memory_model(tiny_dataset, tmp_path):
    ckpt_dir = tmp_path / "ckpt"
    cfg = tiny_config(tiny_dataset, ckpt_dir)
    train(cfg)
    report_a = evaluate(ckpt_dir / "best.npz", tiny_dataset, split="test")
    report_b = evaluate(ckpt_dir / "best.npz", tiny_dataset, split="test")
    np.testing.assert_array_equal(report_a.per_landmark_errors_mm, report_b.per_landmark_errors_mm)
    assert report_a.mre_mm == report_b.mre_mm
    values = [report_a.sdr[t] for t in report_a.thresholds]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_evaluate_empty_split_rejected(tmp_path):
    samples = generate_synthetic(count=2, extent=(64, 64), n_landmarks=2, seed=1, min_separation=12.0)
    root = tmp_path / "ds"
    write_dataset(samples, root)  # everything in train; test split empty
    ckpt_dir = tmp_path / "ckpt"
    cfg = tiny_config(root, ckpt_dir, epochs=1)
    train(cfg)
    with pytest.raises(ContractError):
        evaluate(ckpt_dir / "best.npz", root, split="test")


def test_predict_roundtrip_and_dumps(tiny_dataset, tmp_path):
    ckpt_dir = tmp_path / "ckpt"
    cfg = tiny_config(tiny_dataset, ckpt_dir, epochs=1)
    train(cfg)
    image_path = tiny_dataset / "images" / "0004.png"
    out_path = tmp_path / "pred.txt"
    dump_dir = tmp_path / "dumps"
    landmarks = predict(ckpt_dir / "best.npz", image_path, out_path=out_path, dump_dir=dump_dir)
    assert landmarks.n == 2
    assert len(out_path.read_text().strip().splitlines()) == 2
    reread = read_annotation(out_path, 2)
    np.testing.assert_allclose(reread, landmarks.points, atol=5e-4)
    assert len(list(dump_dir.glob("heat_*.png"))) == 2
    assert len(list(dump_dir.glob("activation_*.png"))) == 2


def test_checkpoint_load_matches_in_memory_model(tiny_dataset, tmp_path):
    ckpt_dir = tmp_path / "ckpt"
    cfg = tiny_config(tiny_dataset, ckpt_dir, epochs=1)
    train(cfg)
    net, _, _ = load_checkpoint(ckpt_dir / "best.npz")
    path = tmp_path / "copy.npz"
    save_checkpoint(path, net, cfg, 1, 0.0, 0.0)
    reloaded, _, _ = load_checkpoint(path)
    for (name_a, a), (name_b, b) in zip(net.state_dict().items(), reloaded.state_dict().items()):
        assert name_a == name_b
        assert torch.equal(a, b)
    x = torch.rand(1, 1, 64, 64)
    with torch.no_grad():
        heat_a, off_a = net(x)
        heat_b, off_b = reloaded(x)
    assert torch.equal(heat_a, heat_b)
    assert torch.equal(off_a, off_b)


def test_nan_weights_abort_names_sample(tiny_dataset, tmp_path):
    spec = tiny_test()
    net = build_backbone(spec, seed=0)
    with torch.no_grad():
        net.conv1.weight[0, 0, 0, 0] = float("nan")
    weights_path = tmp_path / "nan.npz"
    save_weights(net, spec, weights_path)
    cfg = tiny_config(tiny_dataset, tmp_path / "ckpt", weights_source=weights_path, epochs=1)
    with pytest.raises(NumericalError, match="000"):
        train(cfg)


def test_load_train_config_sections_and_overrides(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(
        "[data]\n"
        "dataset_dir = /tmp/ds\n"
        "checkpoint_dir = /tmp/ckpt\n"
        "[model]\n"
        "backbone = tiny_test\n"
        "n_landmarks = 4\n"
        "network_height = 128\n"
        "network_width = 128\n"
        "[training]\n"
        "epochs = 10\n"
        "radius = 8\n"
        "alpha = 0.5\n"
    )
    cfg = load_train_config(path)
    assert cfg.backbone == "tiny_test"
    assert cfg.n_landmarks == 4
    assert cfg.epochs == 10
    assert cfg.alpha == 0.5
    cfg2 = load_train_config(path, overrides={"epochs": 3, "seed": 9})
    assert cfg2.epochs == 3
    assert cfg2.seed == 9

    bad = tmp_path / "bad.cfg"
    bad.write_text("[training]\nnot_a_key = 1\n")
    with pytest.raises(ConfigError):
        load_train_config(bad)


def test_cli_end_to_end(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert (
        cli.main(
            [
                "make-synthetic",
                "--count", "4",
                "--extent", "64x64",
                "--landmarks", "2",
                "--seed", "7",
                "--out", str(ds),
                "--min-separation", "12",
                "--split-counts", "2,1,1",
            ]
        )
        == 0
    )
    assert (ds / "split.txt").is_file()
    assert len(list((ds / "images").glob("*.png"))) == 4

    cfg_path = tmp_path / "train.cfg"
    cfg_path.write_text(
        "[data]\n"
        f"dataset_dir = {ds}\n"
        f"checkpoint_dir = {tmp_path / 'ckpt'}\n"
        "[model]\n"
        "backbone = tiny_test\n"
        "n_landmarks = 2\n"
        "network_height = 64\n"
        "network_width = 64\n"
        "fused_channels = 8\n"
        "lateral_channels = 4\n"
        "attn_hidden = 8\n"
        "[training]\n"
        "radius = 8\n"
        "epochs = 1\n"
        "seed = 0\n"
    )
    assert cli.main(["train", "--config", str(cfg_path)]) == 0

    report_path = tmp_path / "report.txt"
    code = cli.main(
        [
            "eval",
            "--checkpoint", str(tmp_path / "ckpt" / "best.npz"),
            "--dataset", str(ds),
            "--out", str(report_path),
            "--split", "test",
        ]
    )
    assert code == 0
    assert "mre_mm" in report_path.read_text()
    out = capsys.readouterr().out
    assert "MRE" in out

    pred_path = tmp_path / "pred.txt"
    code = cli.main(
        [
            "predict",
            "--checkpoint", str(tmp_path / "ckpt" / "best.npz"),
            "--image", str(ds / "images" / "0003.png"),
            "--out", str(pred_path),
        ]
    )
    assert code == 0
    assert len(pred_path.read_text().strip().splitlines()) == 2


def test_cli_exit_codes(tmp_path, tiny_dataset):
    # config error: zero epochs
    cfg_path = tmp_path / "bad.cfg"
    cfg_path.write_text("[training]\nepochs = 0\n")
    assert cli.main(["train", "--config", str(cfg_path)]) == 1
    # I/O error: checkpoint missing
    assert (
        cli.main(
            [
                "eval",
                "--checkpoint", str(tmp_path / "missing.npz"),
                "--dataset", str(tmp_path),
                "--out", str(tmp_path / "r.txt"),
            ]
        )
        == 2
    )
    # numerical failure: poisoned backbone weights
    spec = tiny_test()
    net = build_backbone(spec, seed=0)
    with torch.no_grad():
        net.conv1.weight[0, 0, 0, 0] = float("nan")
    weights_path = tmp_path / "nan.npz"
    save_weights(net, spec, weights_path)
    nan_cfg = tmp_path / "nan.cfg"
    nan_cfg.write_text(
        "[data]\n"
        f"dataset_dir = {tiny_dataset}\n"
        f"checkpoint_dir = {tmp_path / 'ckpt'}\n"
        f"weights_source = {weights_path}\n"
        "[model]\n"
        "backbone = tiny_test\n"
        "n_landmarks = 2\n"
        "network_height = 64\n"
        "network_width = 64\n"
        "fused_channels = 8\n"
        "lateral_channels = 4\n"
        "attn_hidden = 8\n"
        "[training]\n"
        "radius = 8\n"
        "epochs = 1\n"
    )
    assert cli.main(["train", "--config", str(nan_cfg)]) == 3
