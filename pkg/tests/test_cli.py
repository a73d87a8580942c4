"""Command-line interface: exit codes, precedence, and output formats."""
import json
import os
import shutil
import subprocess
import xml.etree.ElementTree as ET
import zlib

import numpy as np
import pytest

from plasmonet import cli, figures
from plasmonet.em.spectral import SpectralGrid
from plasmonet.errors import TrainingError
from plasmonet.geometry import Mask, sample_structure
from plasmonet.nn import ModelConfig, TrainConfig
from plasmonet.pipeline import (DatasetManifest, ManifestEntry, encode_record,
                                split_dataset, train)

MICRO = ModelConfig(input_width=16, input_height=16, stem_channels=4,
                    stem_kernel=3, stem_stride=2, stage_channels=(4,),
                    stage_blocks=(1,), stage_strides=(2,), gru_hidden=6,
                    dense_width=8, n_out=5, lambda_reg=0.0)


def synth_dataset(out_dir, n=24, w=16, h=16, p=5, seed=0, split=True):
    rng = np.random.default_rng(seed)
    entries = []
    offset = 0
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "records.bin"), "wb") as fh:
        for i in range(n):
            bits = (rng.random((h, w)) < 0.5).astype(np.uint8)
            spec = rng.random(p) * 0.8 + 0.1
            blob = encode_record(Mask(w, h, bits), spec)
            fh.write(blob)
            entries.append(ManifestEntry(id=i, seed=seed + i, offset=offset,
                                         crc32=zlib.crc32(blob[:-4])))
            offset += len(blob)
    man = DatasetManifest(lattice_nm=500.0, film_thickness_nm=50.0,
                          substrate_index=1.5, metal={"model": "synthetic"},
                          mask_width=w, mask_height=h,
                          grid=SpectralGrid(n_points=p), base_seed=seed,
                          sim_config={}, gen_config={}, samples=entries)
    if split:
        split_dataset(man, ratios=(0.6, 0.3, 0.1), seed=0)
    path = os.path.join(out_dir, "manifest.json")
    man.save(path)
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared fixtures: split dataset, micro model config, a trained
    checkpoint, and one mask file."""
    root = tmp_path_factory.mktemp("cli")
    manifest = synth_dataset(str(root / "data"))
    cfg_path = root / "micro.json"
    cfg_path.write_text(json.dumps(MICRO.to_dict()))
    ckpt = str(root / "model.ckpt")
    train(manifest, MICRO,
          TrainConfig(lr=1e-3, l2=0.0, epochs=2, batch_size=8,
                      checkpoint_interval=100, shuffle_seed=3, init_seed=5),
          out_checkpoint=ckpt, log_path=str(root / "train_log.csv"))
    rng = np.random.default_rng(11)
    mask = Mask(16, 16, (rng.random((16, 16)) < 0.5).astype(np.uint8))
    (root / "mask.pgm").write_bytes(mask.to_pgm())
    return {"root": root, "manifest": manifest, "model_config": str(cfg_path),
            "checkpoint": ckpt, "mask_pgm": str(root / "mask.pgm"),
            "mask": mask}


# ----------------------------------------------------------- basic usage

def test_no_args_is_a_usage_error(capsys):
    assert cli.main([]) == 1
    err = capsys.readouterr().err
    assert "usage" in err and "error" in err


def test_unknown_subcommand_and_flag_exit_1(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["gen-structures", "--bogus"]) == 1
    assert "error" in capsys.readouterr().err


def test_help_covers_every_flag_of_every_subcommand(capsys):
    parser = cli.build_parser()
    subactions = [a for a in parser._actions
                  if isinstance(a, type(parser._subparsers._group_actions[0]))]
    choices = subactions[0].choices
    assert set(choices) == {"gen-structures", "simulate", "build-dataset",
                            "split", "train", "eval", "predict", "plot",
                            "export-activations"}
    for name, sub in choices.items():
        assert cli.main([name, "--help"]) == 0
        text = capsys.readouterr().out
        for action in sub._actions:
            for opt in action.option_strings:
                if opt == "-h":
                    continue
                assert opt in text, f"{name} --help does not document {opt}"


def test_top_level_help_exits_0(capsys):
    assert cli.main(["--help"]) == 0
    assert "COMMAND" in capsys.readouterr().out


# ------------------------------------------------------- gen-structures

def test_gen_structures_deterministic_and_seed_offset(tmp_path, capsys):
    a, b, c = (str(tmp_path / n) for n in ("a.json", "b.json", "c.json"))
    assert cli.main(["gen-structures", "--n", "3", "--seed", "7",
                     "--out", a]) == 0
    assert cli.main(["gen-structures", "--n", "3", "--seed", "7",
                     "--out", b]) == 0
    assert cli.main(["gen-structures", "--n", "3", "--seed", "8",
                     "--out", c]) == 0
    blob_a = open(a, "rb").read()
    assert blob_a == open(b, "rb").read()
    assert blob_a != open(c, "rb").read()
    specs = json.loads(blob_a)
    assert isinstance(specs, list) and len(specs) == 3
    # spec i is the library sample at seed + i
    for i, doc in enumerate(specs):
        assert doc == json.loads(sample_structure(7 + i).to_json())


def test_gen_structures_stdout(capsys):
    assert cli.main(["gen-structures"]) == 0
    specs = json.loads(capsys.readouterr().out)
    assert isinstance(specs, list) and len(specs) == 1


# ------------------------------------------------------------- simulate

@pytest.mark.slow
def test_simulate_single_and_batch(tmp_path, capsys):
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps({"dx_nm": 20.0, "dy_nm": 20.0,
                                   "dz_nm": 25.0, "pml_cells": 8}))
    rng = np.random.default_rng(2)
    for name in ("alpha", "beta"):
        # at dx=20 nm the 500 nm cell spans 25 grid points, so the mask
        # must be at least 25 px wide
        bits = (rng.random((25, 25)) < 0.5).astype(np.uint8)
        (tmp_path / f"{name}.pgm").write_bytes(Mask(25, 25, bits).to_pgm())
    out_csv = str(tmp_path / "alpha.csv")
    assert cli.main(["simulate", "--mask", str(tmp_path / "alpha.pgm"),
                     "--sim-config", str(sim_cfg), "--n-points", "4",
                     "--out", out_csv]) == 0
    rows = [l.split(",") for l in open(out_csv).read().splitlines()]
    assert len(rows) == 4
    values = [float(v) for _, v in rows]
    assert all(-0.2 <= v <= 1.2 for v in values)
    # a batch of masks lands in a directory, one CSV per mask
    out_dir = tmp_path / "batch"
    assert cli.main(["simulate", "--mask", str(tmp_path / "alpha.pgm"),
                     "--mask", str(tmp_path / "beta.pgm"),
                     "--sim-config", str(sim_cfg), "--n-points", "4",
                     "--out", str(out_dir)]) == 0
    assert sorted(os.listdir(out_dir)) == ["alpha.csv", "beta.csv"]
    # the batch run of the same mask reproduces the single run byte for byte
    assert open(out_dir / "alpha.csv", "rb").read() == \
        open(out_csv, "rb").read()


def test_simulate_requires_mask(capsys):
    assert cli.main(["simulate"]) == 1
    assert "--mask" in capsys.readouterr().err


# ---------------------------------------------------------------- split

def test_split_prints_sizes_and_respects_force(tmp_path, capsys):
    manifest = synth_dataset(str(tmp_path / "d"), split=False)
    assert cli.main(["split", "--manifest", manifest]) == 0
    out = capsys.readouterr().out
    assert "train: 14" in out and "test: 7" in out and "val: 3" in out
    assert cli.main(["split", "--manifest", manifest]) == 1
    assert cli.main(["split", "--manifest", manifest, "--force"]) == 0


def test_split_reports_thousand_sample_sizes(tmp_path, capsys):
    manifest = synth_dataset(str(tmp_path / "d"), n=1000, p=3, split=False)
    assert cli.main(["split", "--manifest", manifest,
                     "--ratios", "0.6,0.3,0.1"]) == 0
    out = capsys.readouterr().out
    assert "train: 600" in out and "test: 300" in out and "val: 100" in out


def test_split_bad_ratios_exit_1(tmp_path, capsys):
    manifest = synth_dataset(str(tmp_path / "d"), split=False)
    assert cli.main(["split", "--manifest", manifest,
                     "--ratios", "a,b,c"]) == 1
    assert cli.main(["split", "--manifest", manifest,
                     "--ratios", "0.9,0.9,0.9"]) == 1


def test_split_requires_manifest(capsys):
    assert cli.main(["split"]) == 1
    assert "--manifest" in capsys.readouterr().err


# ---------------------------------------------------------------- train

def test_train_flag_beats_config_file_beats_default(workdir, tmp_path, capsys):
    cfg = {"manifest": workdir["manifest"],
           "model_config": workdir["model_config"],
           "epochs": 2, "lr": 1e-3, "batch_size": 8, "l2": 0.0,
           "checkpoint": str(tmp_path / "m.ckpt"),
           "log": str(tmp_path / "log.csv")}
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(cfg_path),
                     "--epochs", "1"]) == 0
    rows = open(tmp_path / "log.csv").read().splitlines()
    assert rows[0] == "epoch,train_mse,test_mse,seconds"
    assert len(rows) == 2            # flag --epochs 1 beat the file's 2
    out = capsys.readouterr().out
    assert "epochs: 1" in out and "checkpoint:" in out


def test_train_unknown_config_key_exit_1(workdir, tmp_path, capsys):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"epocs": 3}))
    assert cli.main(["train", "--manifest", workdir["manifest"],
                     "--config", str(cfg_path)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_train_config_must_be_json_object(workdir, tmp_path, capsys):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text("[1, 2]")
    assert cli.main(["train", "--manifest", workdir["manifest"],
                     "--config", str(cfg_path)]) == 1


def test_train_internal_error_exit_2(workdir, monkeypatch, tmp_path, capsys):
    def boom(*a, **k):
        raise TrainingError("synthetic failure")
    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--manifest", workdir["manifest"],
                     "--model-config", workdir["model_config"],
                     "--checkpoint", str(tmp_path / "m.ckpt"),
                     "--log", str(tmp_path / "l.csv")]) == 2
    assert "internal error" in capsys.readouterr().err


def test_unexpected_exception_exit_2(workdir, monkeypatch, capsys):
    monkeypatch.setattr(cli, "evaluate",
                        lambda *a, **k: (_ for _ in ()).throw(RuntimeError("x")))
    assert cli.main(["eval", "--manifest", workdir["manifest"],
                     "--checkpoint", workdir["checkpoint"]]) == 2
    assert "RuntimeError" in capsys.readouterr().err


def test_train_resume_cli(workdir, tmp_path, capsys):
    args = ["train", "--manifest", workdir["manifest"],
            "--model-config", workdir["model_config"],
            "--lr", "1e-3", "--l2", "0", "--batch-size", "8",
            "--seed", "3",
            "--checkpoint", str(tmp_path / "m.ckpt"),
            "--log", str(tmp_path / "log.csv")]
    assert cli.main(args + ["--epochs", "2"]) == 0
    assert cli.main(args + ["--epochs", "4", "--resume"]) == 0
    rows = open(tmp_path / "log.csv").read().splitlines()
    assert len(rows) == 5 and rows[0].startswith("epoch,")
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    assert "epochs: 4" in capsys.readouterr().out


def test_train_stop_below_and_select_best_cli(workdir, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert cli.main(["train", "--manifest", workdir["manifest"],
                     "--model-config", workdir["model_config"],
                     "--lr", "1e-3", "--l2", "0", "--epochs", "50",
                     "--stop-below", "1.0", "--select-best",
                     "--checkpoint", str(ckpt),
                     "--log", str(tmp_path / "log.csv")]) == 0
    rows = open(tmp_path / "log.csv").read().splitlines()
    assert len(rows) == 2            # any finite MSE is below 1.0: one epoch
    assert ckpt.exists() and (tmp_path / "m.ckpt.best").exists()


@pytest.mark.slow
def test_build_dataset_cli(tmp_path, capsys):
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps({"dx_nm": 20.0, "dy_nm": 20.0,
                                   "dz_nm": 25.0, "pml_cells": 8}))
    out = tmp_path / "ds"
    assert cli.main(["build-dataset", "--n", "3", "--seed", "5",
                     "--mask-width", "25", "--mask-height", "25",
                     "--n-points", "4", "--sim-config", str(sim_cfg),
                     "--out", str(out)]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed == str(out / "manifest.json")
    man = DatasetManifest.load(printed)
    assert len(man.samples) == 3 and man.samples[0].seed == 5
    man.validate()


# ----------------------------------------------------------------- eval

def test_eval_json_report(workdir, capsys):
    assert cli.main(["eval", "--manifest", workdir["manifest"],
                     "--checkpoint", workdir["checkpoint"]]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["splits"]) == {"train", "test", "val"}
    for name in ("train", "test", "val"):
        entry = doc["splits"][name]
        assert entry["mse"] > 0 and entry["baseline_mse"] > 0


def test_eval_single_split_and_out_file(workdir, tmp_path, capsys):
    out = tmp_path / "metrics.json"
    assert cli.main(["eval", "--manifest", workdir["manifest"],
                     "--checkpoint", workdir["checkpoint"],
                     "--splits", "train", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert set(doc["splits"]) == {"train"}


def test_eval_unknown_split_exit_1(workdir, capsys):
    assert cli.main(["eval", "--manifest", workdir["manifest"],
                     "--checkpoint", workdir["checkpoint"],
                     "--splits", "validation"]) == 1
    assert "validation" in capsys.readouterr().err


# -------------------------------------------------------------- predict

def test_predict_csv_rows_and_determinism(workdir, tmp_path, capsys):
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    for path in (a, b):
        assert cli.main(["predict", "--mask", workdir["mask_pgm"],
                         "--checkpoint", workdir["checkpoint"],
                         "--out", path]) == 0
    blob = open(a, "rb").read()
    assert blob == open(b, "rb").read()
    rows = [l.split(",") for l in blob.decode().splitlines()]
    assert len(rows) == MICRO.n_out
    wl = np.array([float(w) for w, _ in rows])
    expected = SpectralGrid(n_points=MICRO.n_out).wavelengths_nm()
    assert np.allclose(wl, expected, rtol=1e-12)
    assert all(0.0 < float(v) < 1.0 for _, v in rows)


def test_predict_accepts_structure_spec_json(workdir, tmp_path, capsys):
    spec_path = str(tmp_path / "spec.json")
    assert cli.main(["gen-structures", "--seed", "3",
                     "--out", spec_path]) == 0
    # the one-element array gen-structures emits works as-is
    assert cli.main(["predict", "--mask", spec_path,
                     "--checkpoint", workdir["checkpoint"],
                     "--out", str(tmp_path / "p.csv")]) == 0
    rows = open(tmp_path / "p.csv").read().splitlines()
    assert len(rows) == MICRO.n_out
    # so does the bare spec object
    single = json.loads(open(spec_path).read())[0]
    open(spec_path, "w").write(json.dumps(single))
    assert cli.main(["predict", "--mask", spec_path,
                     "--checkpoint", workdir["checkpoint"],
                     "--out", str(tmp_path / "p2.csv")]) == 0
    assert open(tmp_path / "p2.csv").read() == \
        open(tmp_path / "p.csv").read()


def test_predict_rejects_multi_spec_mask(workdir, tmp_path, capsys):
    spec_path = str(tmp_path / "many.json")
    assert cli.main(["gen-structures", "--n", "2", "--seed", "3",
                     "--out", spec_path]) == 0
    assert cli.main(["predict", "--mask", spec_path,
                     "--checkpoint", workdir["checkpoint"],
                     "--out", str(tmp_path / "p.csv")]) == 1
    assert "exactly one" in capsys.readouterr().err


# ----------------------------------------------------------------- plot

@pytest.fixture()
def two_spectra(workdir, tmp_path):
    pred = str(tmp_path / "pred.csv")
    assert cli.main(["predict", "--mask", workdir["mask_pgm"],
                     "--checkpoint", workdir["checkpoint"],
                     "--out", pred]) == 0
    wl = SpectralGrid(n_points=MICRO.n_out).wavelengths_nm()
    rng = np.random.default_rng(5)
    sim = str(tmp_path / "sim.csv")
    with open(sim, "w") as fh:
        for w, v in zip(wl, rng.random(MICRO.n_out)):
            fh.write(f"{float(w)!r},{float(v)!r}\n")
    return pred, sim


def test_plot_svg_structure_and_determinism(two_spectra, tmp_path, capsys):
    pred, sim = two_spectra
    a, b = str(tmp_path / "a.svg"), str(tmp_path / "b.svg")
    for out in (a, b):
        assert cli.main(["plot", "--simulated", sim, "--predicted", pred,
                         "--out", out]) == 0
    blob = open(a, "rb").read()
    assert blob == open(b, "rb").read()
    root = ET.fromstring(blob.decode())
    assert root.tag.endswith("svg")
    polylines = [el for el in root.iter() if el.tag.endswith("polyline")]
    assert len(polylines) == 2
    for el in polylines:
        assert len(el.attrib["points"].split()) == MICRO.n_out
    text = blob.decode()
    assert "simulated" in text and "predicted" in text
    assert "wavelength (nm)" in text and "absorption" in text


def test_plot_length_mismatch_exit_1(two_spectra, tmp_path, capsys):
    pred, sim = two_spectra
    lines = open(sim).read().splitlines()
    open(sim, "w").write("\n".join(lines[:-1]) + "\n")
    assert cli.main(["plot", "--simulated", sim, "--predicted", pred,
                     "--out", str(tmp_path / "o.svg")]) == 1
    assert "length" in capsys.readouterr().err


def test_plot_grid_mismatch_exit_1(two_spectra, tmp_path, capsys):
    pred, sim = two_spectra
    rows = [l.split(",") for l in open(sim).read().splitlines()]
    with open(sim, "w") as fh:
        for w, v in rows:
            fh.write(f"{float(w) + 1.0!r},{v}\n")
    assert cli.main(["plot", "--simulated", sim, "--predicted", pred,
                     "--out", str(tmp_path / "o.svg")]) == 1
    assert "grid" in capsys.readouterr().err


def test_plot_rejects_non_uniform_frequency_grid(workdir, tmp_path, capsys):
    # rows uniform in wavelength, not in frequency
    wl = np.linspace(800.0, 1700.0, MICRO.n_out)
    for name in ("s.csv", "p.csv"):
        with open(tmp_path / name, "w") as fh:
            for w in wl:
                fh.write(f"{float(w)!r},0.5\n")
    assert cli.main(["plot", "--simulated", str(tmp_path / "s.csv"),
                     "--predicted", str(tmp_path / "p.csv"),
                     "--out", str(tmp_path / "o.svg")]) == 1


# --------------------------------------------------- export-activations

def test_export_activations_files_and_input_identity(workdir, tmp_path, capsys):
    out_dir = str(tmp_path / "acts")
    assert cli.main(["export-activations", "--checkpoint",
                     workdir["checkpoint"], "--mask", workdir["mask_pgm"],
                     "--out-dir", out_dir]) == 0
    printed = capsys.readouterr().out.splitlines()
    names = sorted(os.listdir(out_dir))
    # input (1 channel) + stem (4) + one residual block (4)
    assert len(names) == 9 and len(printed) == 9
    assert names[0] == "input_c000.pgm"
    assert open(os.path.join(out_dir, "input_c000.pgm"), "rb").read() == \
        workdir["mask"].to_pgm()
    for name in names:
        assert open(os.path.join(out_dir, name), "rb").read()[:2] == b"P5"


def test_export_activations_single_layer(workdir, tmp_path, capsys):
    out_dir = str(tmp_path / "one")
    assert cli.main(["export-activations", "--checkpoint",
                     workdir["checkpoint"], "--mask", workdir["mask_pgm"],
                     "--layers", "stem", "--out-dir", out_dir]) == 0
    assert sorted(os.listdir(out_dir)) == [f"stem_c{c:03d}.pgm"
                                           for c in range(4)]


def test_export_activations_unknown_layer_lists_valid(workdir, tmp_path,
                                                      capsys):
    assert cli.main(["export-activations", "--checkpoint",
                     workdir["checkpoint"], "--mask", workdir["mask_pgm"],
                     "--layers", "bogus",
                     "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "s0.b0" in err and "stem" in err


# -------------------------------------------------- environment override

def test_out_root_redirects_relative_outputs_only(workdir, tmp_path,
                                                  monkeypatch, capsys):
    out_root = tmp_path / "outputs"
    out_root.mkdir()
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    monkeypatch.chdir(cwd)
    monkeypatch.setenv("PLASMONET_OUT_ROOT", str(out_root))
    # relative --out lands under the override root, not the cwd
    assert cli.main(["gen-structures", "--out", "specs.json"]) == 0
    assert (out_root / "specs.json").exists()
    assert not (cwd / "specs.json").exists()
    # relative *input* paths are untouched: a mask in cwd is still found
    shutil.copy(workdir["mask_pgm"], cwd / "m.pgm")
    assert cli.main(["predict", "--mask", "m.pgm",
                     "--checkpoint", workdir["checkpoint"],
                     "--out", "pred.csv"]) == 0
    assert (out_root / "pred.csv").exists()
    # absolute outputs ignore the override
    target = str(tmp_path / "abs.csv")
    assert cli.main(["predict", "--mask", "m.pgm",
                     "--checkpoint", workdir["checkpoint"],
                     "--out", target]) == 0
    assert os.path.exists(target)


# ------------------------------------------------------- installed script

def test_console_script_is_on_path():
    exe = shutil.which("plasmonet")
    assert exe, "the plasmonet console script is not installed"
    proc = subprocess.run([exe, "gen-structures", "--n", "1", "--seed", "0"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    specs = json.loads(proc.stdout)
    assert len(specs) == 1
