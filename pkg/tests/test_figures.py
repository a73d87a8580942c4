"""SVG spectra plots and PGM activation dumps."""
import os
import re
import xml.etree.ElementTree as ET
import zlib

import numpy as np
import pytest

from plasmonet import figures
from plasmonet.em.spectral import SpectralGrid
from plasmonet.errors import ShapeError
from plasmonet.geometry import Mask
from plasmonet.nn import ModelConfig, TrainConfig
from plasmonet.pipeline import (DatasetManifest, ManifestEntry, encode_record,
                                split_dataset, train)

MICRO = ModelConfig(input_width=16, input_height=16, stem_channels=4,
                    stem_kernel=3, stem_stride=2, stage_channels=(4,),
                    stage_blocks=(1,), stage_strides=(2,), gru_hidden=6,
                    dense_width=8, n_out=5, lambda_reg=0.0)

GRID = SpectralGrid(n_points=5)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("figs")
    rng = np.random.default_rng(0)
    entries, offset = [], 0
    with open(root / "records.bin", "wb") as fh:
        for i in range(12):
            bits = (rng.random((16, 16)) < 0.5).astype(np.uint8)
            blob = encode_record(Mask(16, 16, bits), rng.random(5) * 0.8 + 0.1)
            fh.write(blob)
            entries.append(ManifestEntry(id=i, seed=i, offset=offset,
                                         crc32=zlib.crc32(blob[:-4])))
            offset += len(blob)
    man = DatasetManifest(lattice_nm=500.0, film_thickness_nm=50.0,
                          substrate_index=1.5, metal={"model": "synthetic"},
                          mask_width=16, mask_height=16, grid=GRID,
                          base_seed=0, sim_config={}, gen_config={},
                          samples=entries)
    split_dataset(man, ratios=(0.6, 0.3, 0.1), seed=0)
    man.save(str(root / "manifest.json"))
    ckpt = str(root / "m.ckpt")
    train(str(root / "manifest.json"), MICRO,
          TrainConfig(lr=1e-3, l2=0.0, epochs=1, batch_size=8),
          out_checkpoint=ckpt, log_path=str(root / "log.csv"))
    return ckpt


# ------------------------------------------------------------------ plot

def test_plot_rejects_bad_shapes(tmp_path):
    out = str(tmp_path / "o.svg")
    with pytest.raises(ShapeError):
        figures.plot_spectra(np.zeros(4), np.zeros(5), GRID, out)
    with pytest.raises(ShapeError):
        figures.plot_spectra(np.zeros((5, 1)), np.zeros((5, 1)), GRID, out)
    with pytest.raises(ShapeError):
        figures.plot_spectra(np.zeros(4), np.zeros(4), GRID, out)


def test_plot_axes_and_legend(tmp_path):
    out = str(tmp_path / "o.svg")
    figures.plot_spectra(np.linspace(0.1, 0.9, 5), np.linspace(0.9, 0.1, 5),
                         GRID, out)
    text = open(out, encoding="utf-8").read()
    root = ET.fromstring(text)
    assert root.tag.endswith("svg")
    for label in ("0.00", "0.25", "0.50", "0.75", "1.00"):
        assert label in text          # absorption axis ticks
    wl = GRID.wavelengths_nm()
    assert f"{wl.min():.0f}" in text and f"{wl.max():.0f}" in text
    assert "wavelength (nm)" in text and "absorption" in text
    assert "simulated" in text and "predicted" in text
    assert text.endswith("\n")


def test_plot_clips_values_into_the_box(tmp_path):
    out = str(tmp_path / "o.svg")
    figures.plot_spectra(np.array([-0.5, 0.0, 0.5, 1.0, 1.5]),
                         np.zeros(5), GRID, out)
    root = ET.fromstring(open(out, encoding="utf-8").read())
    polylines = [el for el in root.iter() if el.tag.endswith("polyline")]
    assert len(polylines) == 2
    for el in polylines:
        for pair in el.attrib["points"].split():
            x, y = (float(v) for v in pair.split(","))
            assert figures._ML - 1e-9 <= x <= figures._W - figures._MR + 1e-9
            assert figures._MT - 1e-9 <= y <= figures._H - figures._MB + 1e-9
    # the constant-zero curve sits exactly on the axis baseline
    baseline = float(figures._H - figures._MB)
    zero_ys = {float(p.split(",")[1]) for el in polylines
               for p in el.attrib["points"].split()
               if el.attrib.get("stroke-dasharray") is None}
    assert zero_ys == {baseline}


def test_plot_identical_curves_coincide(tmp_path):
    out = str(tmp_path / "o.svg")
    curve = np.linspace(0.2, 0.8, 5)
    figures.plot_spectra(curve, curve, GRID, out)
    root = ET.fromstring(open(out, encoding="utf-8").read())
    points = [el.attrib["points"] for el in root.iter()
              if el.tag.endswith("polyline")]
    assert len(points) == 2 and points[0] == points[1]


def test_plot_bytes_are_deterministic(tmp_path):
    a, b = str(tmp_path / "a.svg"), str(tmp_path / "b.svg")
    pred = np.linspace(0.2, 0.8, 5)
    sim = np.linspace(0.7, 0.3, 5)
    figures.plot_spectra(pred, sim, GRID, a)
    figures.plot_spectra(pred, sim, GRID, b)
    assert open(a, "rb").read() == open(b, "rb").read()


# ------------------------------------------------------------ activations

def test_valid_activation_layers_tracks_architecture():
    assert figures.valid_activation_layers(MICRO) == ("input", "stem", "s0.b0")
    import dataclasses
    two = dataclasses.replace(MICRO, stage_channels=(4, 8),
                              stage_blocks=(1, 2), stage_strides=(2, 2))
    assert figures.valid_activation_layers(two) == (
        "input", "stem", "s0.b0", "s1.b0", "s1.b1")


def test_export_writes_pgms_with_downsampled_dims(checkpoint, tmp_path):
    rng = np.random.default_rng(4)
    mask = Mask(16, 16, (rng.random((16, 16)) < 0.5).astype(np.uint8))
    out_dir = str(tmp_path / "acts")
    written = figures.export_activations(checkpoint, mask,
                                         ("input", "stem", "s0.b0"), out_dir)
    assert [os.path.basename(p) for p in written] == [
        "input_c000.pgm",
        "stem_c000.pgm", "stem_c001.pgm", "stem_c002.pgm", "stem_c003.pgm",
        "s0_b0_c000.pgm", "s0_b0_c001.pgm", "s0_b0_c002.pgm", "s0_b0_c003.pgm"]
    dims = {"input": b"16 16", "stem": b"8 8", "s0_b0": b"4 4"}
    for path in written:
        blob = open(path, "rb").read()
        prefix = os.path.basename(path).rsplit("_c", 1)[0]
        assert blob.startswith(b"P5\n" + dims[prefix] + b"\n255\n")
    # repeat run produces identical bytes
    again = figures.export_activations(checkpoint, mask,
                                       ("input", "stem", "s0.b0"),
                                       str(tmp_path / "acts2"))
    for p1, p2 in zip(written, again):
        assert open(p1, "rb").read() == open(p2, "rb").read()


def test_export_input_matches_mask_pgm(checkpoint, tmp_path):
    mask = Mask(16, 16, np.zeros((16, 16), dtype=np.uint8))
    written = figures.export_activations(checkpoint, mask, ("input",),
                                         str(tmp_path))
    assert open(written[0], "rb").read() == mask.to_pgm()


def test_export_unknown_layer_names_the_valid_ones(checkpoint, tmp_path):
    mask = Mask(16, 16, np.ones((16, 16), dtype=np.uint8))
    with pytest.raises(ShapeError) as err:
        figures.export_activations(checkpoint, mask, ("nope",), str(tmp_path))
    assert "s0.b0" in str(err.value)
