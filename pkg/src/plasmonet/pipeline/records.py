"""Dataset record file and manifest.

Record file: concatenated binary records, one per sample, laid out as

    magic   b"PSPC1"
    width   u32 LE
    height  u32 LE
    n_pts   u32 LE
    mask    ceil(width*height/8) bytes, row-major bits, LSB first
    A       n_pts float64 LE
    crc     u32 LE, CRC32 of every preceding byte of the record

Manifest: a JSON document next to the record file holding the physical
metadata, the spectral grid, generator and solver configs, and one entry
per sample (id, seed actually used, byte offset, record CRC, split tag).
Serialization is key-sorted with compact separators, so equal content
means equal bytes.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

from ..errors import DatasetError, FormatError
from ..geometry import Mask
from ..em.spectral import SpectralGrid

_MAGIC = b"PSPC1"
_HEAD = struct.Struct("<5sIII")
_CRC = struct.Struct("<I")

SPLITS = ("train", "test", "val")
FORMAT_VERSION = 1


@dataclass
class SampleRecord:
    mask: Mask
    spectrum: np.ndarray

    def validate(self) -> None:
        spec = np.asarray(self.spectrum, dtype=np.float64)
        if spec.ndim != 1 or spec.size < 1:
            raise FormatError(f"spectrum must be a nonempty vector, got shape {spec.shape}")
        if not np.isfinite(spec).all():
            raise FormatError("spectrum contains non-finite values")


def encode_record(mask: Mask, spectrum: np.ndarray) -> bytes:
    rec = SampleRecord(mask, np.asarray(spectrum, dtype=np.float64))
    rec.validate()
    body = _HEAD.pack(_MAGIC, mask.width, mask.height, rec.spectrum.size)
    body += mask.packed()
    body += rec.spectrum.astype("<f8").tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def decode_record(buf: bytes, offset: int = 0) -> tuple[SampleRecord, int, int]:
    """Returns (record, crc, offset past the record)."""
    try:
        magic, width, height, n_pts = _HEAD.unpack_from(buf, offset)
    except struct.error as e:
        raise FormatError(f"truncated record header at offset {offset}") from e
    if magic != _MAGIC:
        raise FormatError(f"bad record magic {magic!r} at offset {offset}")
    n_mask = (width * height + 7) // 8
    start = offset + _HEAD.size
    end = start + n_mask + 8 * n_pts + _CRC.size
    if end > len(buf):
        raise FormatError(f"truncated record payload at offset {offset}")
    stored = _CRC.unpack_from(buf, end - _CRC.size)[0]
    actual = zlib.crc32(buf[offset:end - _CRC.size])
    if stored != actual:
        raise FormatError(
            f"record CRC mismatch at offset {offset}: stored {stored:#010x},"
            f" computed {actual:#010x}"
        )
    mask = Mask.from_packed(width, height, buf[start:start + n_mask])
    spectrum = np.frombuffer(buf[start + n_mask:end - _CRC.size], dtype="<f8").copy()
    rec = SampleRecord(mask, spectrum)
    rec.validate()
    return rec, stored, end


def read_record_at(fh: BinaryIO, offset: int) -> tuple[SampleRecord, int]:
    """Read one record from an open file; returns (record, crc)."""
    fh.seek(offset)
    head = fh.read(_HEAD.size)
    try:
        magic, width, height, n_pts = _HEAD.unpack(head)
    except struct.error as e:
        raise FormatError(f"truncated record header at offset {offset}") from e
    if magic != _MAGIC:
        raise FormatError(f"bad record magic {magic!r} at offset {offset}")
    n_mask = (width * height + 7) // 8
    rest = fh.read(n_mask + 8 * n_pts + _CRC.size)
    rec, crc, _ = decode_record(head + rest, 0)
    return rec, crc


@dataclass
class ManifestEntry:
    id: int
    seed: int
    offset: int
    crc32: int
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    lattice_nm: float
    film_thickness_nm: float
    substrate_index: float
    metal: dict
    mask_width: int
    mask_height: int
    grid: SpectralGrid
    base_seed: int
    sim_config: dict
    gen_config: dict
    samples: list = field(default_factory=list)
    records_file: str = "records.bin"
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        n = len(self.samples)
        last_offset = -1
        assigned = 0
        for i, e in enumerate(self.samples):
            if e.id != i:
                raise DatasetError(f"sample ids not dense at position {i}: got {e.id}")
            if e.offset <= last_offset:
                raise DatasetError(f"record offsets not strictly increasing at id {e.id}")
            last_offset = e.offset
            if e.split != "unassigned":
                if e.split not in SPLITS:
                    raise DatasetError(f"unknown split tag {e.split!r} at id {e.id}")
                assigned += 1
        if assigned not in (0, n):
            raise DatasetError(
                f"split tags must cover all samples or none; {assigned} of {n} assigned"
            )

    @property
    def is_split(self) -> bool:
        return bool(self.samples) and self.samples[0].split != "unassigned"

    def ids_for(self, split: str) -> list:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [e.id for e in self.samples if e.split == split]

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "lattice_nm": self.lattice_nm,
            "film_thickness_nm": self.film_thickness_nm,
            "substrate_index": self.substrate_index,
            "metal": self.metal,
            "mask_width": self.mask_width,
            "mask_height": self.mask_height,
            "spectral_grid": self.grid.to_dict(),
            "base_seed": self.base_seed,
            "sim_config": self.sim_config,
            "gen_config": self.gen_config,
            "records_file": self.records_file,
            "samples": [
                {"id": e.id, "seed": e.seed, "offset": e.offset,
                 "crc32": e.crc32, "split": e.split}
                for e in self.samples
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"manifest is not valid JSON: {e}") from e
        try:
            version = int(doc["format_version"])
            if version != FORMAT_VERSION:
                raise FormatError(
                    f"manifest format version {version} unsupported;"
                    f" this build reads version {FORMAT_VERSION}"
                )
            man = DatasetManifest(
                lattice_nm=float(doc["lattice_nm"]),
                film_thickness_nm=float(doc["film_thickness_nm"]),
                substrate_index=float(doc["substrate_index"]),
                metal=dict(doc["metal"]),
                mask_width=int(doc["mask_width"]),
                mask_height=int(doc["mask_height"]),
                grid=SpectralGrid.from_dict(doc["spectral_grid"]),
                base_seed=int(doc["base_seed"]),
                sim_config=dict(doc["sim_config"]),
                gen_config=dict(doc["gen_config"]),
                records_file=str(doc["records_file"]),
                samples=[
                    ManifestEntry(id=int(s["id"]), seed=int(s["seed"]),
                                  offset=int(s["offset"]), crc32=int(s["crc32"]),
                                  split=str(s["split"]))
                    for s in doc["samples"]
                ],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad manifest document: {e}") from e
        man.validate()
        return man

    def save(self, path: str) -> None:
        """Write atomically: temp file in the same directory, then rename."""
        self.validate()
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="ascii") as fh:
            fh.write(self.to_json())
            fh.write("\n")
        os.replace(tmp, path)

    @staticmethod
    def load(path: str) -> "DatasetManifest":
        with open(path, "r", encoding="ascii") as fh:
            return DatasetManifest.from_json(fh.read())


def load_samples(manifest_path: str,
                 ids: Optional[list] = None) -> tuple[DatasetManifest, np.ndarray, np.ndarray]:
    """Load (manifest, masks [N,H,W] uint8, spectra [N,P] float64), CRC checked.

    `ids` restricts and orders the loaded samples; default is all in id order.
    """
    man = DatasetManifest.load(manifest_path)
    rec_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)),
                            man.records_file)
    wanted = list(range(len(man.samples))) if ids is None else list(ids)
    masks = np.zeros((len(wanted), man.mask_height, man.mask_width), dtype=np.uint8)
    spectra = np.zeros((len(wanted), man.grid.n_points))
    with open(rec_path, "rb") as fh:
        for row, i in enumerate(wanted):
            if not 0 <= i < len(man.samples):
                raise DatasetError(f"sample id {i} outside the manifest")
            entry = man.samples[i]
            rec, crc = read_record_at(fh, entry.offset)
            if crc != entry.crc32:
                raise FormatError(
                    f"record {i} CRC {crc:#010x} does not match manifest"
                    f" {entry.crc32:#010x}"
                )
            if rec.mask.width != man.mask_width or rec.mask.height != man.mask_height:
                raise FormatError(f"record {i} mask dims differ from manifest")
            if rec.spectrum.size != man.grid.n_points:
                raise FormatError(f"record {i} spectrum length differs from manifest")
            masks[row] = rec.mask.bits
            spectra[row] = rec.spectrum
    return man, masks, spectra
