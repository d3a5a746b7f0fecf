import numpy as np
import pytest

from scadefense import checkpoint, experiment
from scadefense.cli import main
from scadefense.config import ConfigError, ExperimentConfig, load_config, parse_config
from scadefense.data import synth_gaussian_blobs, write_idx
from scadefense.defenses import ArchitectureConfig, DefenseSpec, build
from scadefense.experiment import ResultRow, read_csv, report_markdown, rows_to_csv
from scadefense.nn import Model


@pytest.fixture
def workspace(tmp_path):
    ds = synth_gaussian_blobs(3, 20, 8, seed=1)
    write_idx(ds, tmp_path / "img.gz", tmp_path / "lab.gz")
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "# tiny experiment\n"
        "dataset = blobs\n"
        f"images_path = {tmp_path / 'img.gz'}\n"
        f"labels_path = {tmp_path / 'lab.gz'}\n"
        "downsample = 1\n"
        "defense = none   # plain network\n"
        "epochs = 2\n"
        "hidden_width = 16\n"
        "attack_hidden = 32\n"
        "attack_epochs = 2\n"
        "fx_epochs = 2\n"
        f"output_dir = {tmp_path / 'out'}\n"
    )
    return tmp_path, cfg


def test_config_parsing_and_errors(tmp_path):
    cfg = parse_config("defense = sca(0.5)\nepochs = 3 # comment\n\nlca_backprop = true\n")
    assert (cfg.defense, cfg.epochs, cfg.lca_backprop) == ("sca(0.5)", 3, True)
    with pytest.raises(ConfigError, match=":2:"):
        parse_config("epochs = 3\nepochs = x\n")
    with pytest.raises(ConfigError, match=":1: unknown key"):
        parse_config("nonsense = 1\n")
    with pytest.raises(ConfigError, match=":2:"):
        parse_config("epochs = 1\njust words\n")
    with pytest.raises(ConfigError, match="out of scope"):
        parse_config("defense = gan\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    text = ExperimentConfig(defense="sca(0.25)", epochs=4).to_text()
    assert parse_config(text) == ExperimentConfig(defense="sca(0.25)", epochs=4)


def test_config_overrides_and_seeds():
    cfg = parse_config("seed_model = 1\n", overrides={"seed_model": "5", "epochs": 2})
    assert (cfg.seed_model, cfg.epochs) == (5, 2)
    assert cfg.with_seeds(7).seed_attack == 7


def test_checkpoint_round_trip_bit_identical(tmp_path):
    spec, _, _ = build(DefenseSpec.parse("sca(0.5)"), ((1, 6, 6), 3),
                       ArchitectureConfig(hidden_width=8, n_atoms=2, kernel_size=3, lca_iterations=5, lca_step=50))
    model = Model(spec)
    model.layers[1].running_mean[...] = [0.25, -1.5]
    checkpoint.save(tmp_path / "m.ckpt", model, {"defense": "sca(0.5)"})
    loaded, info = checkpoint.load(tmp_path / "m.ckpt")
    assert info == {"defense": "sca(0.5)"}
    x = np.random.default_rng(0).random((4, 1, 6, 6))
    assert model.forward(x)[0].tobytes() == loaded.forward(x)[0].tobytes()
    assert checkpoint.dumps(model) == checkpoint.dumps(loaded)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"SCA1"
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + raw[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(raw[:-3])
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "nothing.ckpt")


def test_report_ordering():
    def row(defense, psnr, dataset="mnist"):
        return ResultRow(dataset, defense, "end_to_end", psnr, 0.5, 1.0, 0.9, 0)

    single = report_markdown([row("none", 40.87)])
    assert single.count("| none |") == 1
    text = report_markdown([row("sca(0.5)", 17.85), row("none", 40.87)])
    assert text.index("| none |") < text.index("| sca(0.5) |")
    tied = report_markdown([row("zeta", 20.0), row("alpha", 20.0)])
    assert tied.index("| alpha |") < tied.index("| zeta |")
    assert "PSNR ⇊" in text and "FID ⇈" in text
    with pytest.raises(ValueError):
        report_markdown([])


def test_csv_round_trip(tmp_path):
    rows = [ResultRow("mnist", "sca(0.5)", "split", 17.5, 0.5, 2.25, 0.97, 3, None)]
    path = tmp_path / "r.csv"
    experiment.append_csv(path, rows)
    experiment.append_csv(path, rows)
    text = path.read_text()
    assert text.splitlines()[0] == ",".join(experiment.CSV_COLUMNS)
    assert len(text.splitlines()) == 3
    back = read_csv(path)
    assert back[0].defense == "sca(0.5)" and back[0].wall_time_s is None
    assert rows_to_csv(back) == rows_to_csv(rows + rows)


def test_train_attack_evaluate_report(workspace, capsys):
    tmp, cfg = workspace
    ckpt = tmp / "t.ckpt"
    assert main(["train", "--config", str(cfg), "--out", str(ckpt), "--seed", "3"]) == 0
    first = ckpt.read_bytes()
    assert main(["train", "--config", str(cfg), "--out", str(ckpt), "--seed", "3"]) == 0
    assert ckpt.read_bytes() == first
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(ckpt), "--seed", "3"]) == 0
    csv_path = tmp / "res.csv"
    grid = tmp / "grid.pgm"
    args = ["attack", "--config", str(cfg), "--checkpoint", str(ckpt), "--seed", "3", "--csv", str(csv_path),
            "--grid", str(grid)]
    assert main(args) == 0
    assert main(args) == 0
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 3 and lines[1] == lines[2]
    assert grid.read_bytes().startswith(b"P5")
    assert main(["report", str(csv_path), "--out", str(tmp / "r.md")]) == 0
    assert "| none |" in (tmp / "r.md").read_text()
    out = capsys.readouterr().out
    assert "test accuracy" in out


def test_untrained_epochs_zero_checkpoint(workspace):
    tmp, cfg = workspace
    assert main(["train", "--config", str(cfg), "--set", "epochs=0", "--out", str(tmp / "z.ckpt")]) == 0
    model, info = checkpoint.load(tmp / "z.ckpt")
    assert info["defense"] == "none"


def test_cli_errors(workspace, capsys):
    tmp, cfg = workspace
    assert main(["train", "--config", str(cfg), "--set", "defense=gan"]) == 2
    assert "out of scope" in capsys.readouterr().err
    assert main(["attack", "--config", str(cfg), "--checkpoint", str(tmp / "absent.ckpt")]) == 2
    assert main(["train", "--config", str(tmp / "absent.cfg")]) == 2
    ckpt = tmp / "t.ckpt"
    main(["train", "--config", str(cfg), "--out", str(ckpt)])
    assert main(["attack", "--config", str(cfg), "--checkpoint", str(ckpt), "--set", "defense=sca(0.5)"]) == 2


def test_run_is_byte_deterministic(workspace):
    tmp, cfg = workspace
    outputs = []
    for name in ("a.csv", "b.csv"):
        assert main(["run", "--config", str(cfg), "--defense", "none", "--defense", "gaussian_noise(0.5)",
                     "--seeds", "0", "1", "--csv", str(tmp / name)]) == 0
        outputs.append((tmp / name).read_bytes())
    assert outputs[0] == outputs[1]
    assert len(outputs[0].decode().splitlines()) == 5
