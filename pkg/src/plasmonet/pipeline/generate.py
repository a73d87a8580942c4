"""Dataset generation: sample structures, run the solver, assemble records.

Sample i draws its structure from seed base_seed + i. A run that raises a
solver error or stops without reaching the energy-decay criterion is retried
with the seed shifted by +n per attempt (a fresh structure, still unique to
sample i); the seed that finally produced the record is what the manifest
stores. Workers only affect scheduling: records are assembled in id order,
so the output bytes depend solely on (n, base_seed, configs, grid).
"""
from __future__ import annotations

import multiprocessing
import os
import sys
import time
from typing import Optional

from ..errors import DatasetError, SimulationError
from ..geometry import GenConfig, Mask, rasterize, sample_structure
from ..em.fdtd import SimConfig, run_fdtd
from ..em.spectral import SpectralGrid
from .records import DatasetManifest, ManifestEntry, encode_record

_MAX_ATTEMPTS = 8

_worker_ctx: dict = {}


def _init_worker(gen_cfg, sim_cfg, grid, width, height, base_seed, n) -> None:
    _worker_ctx.update(gen_cfg=gen_cfg, sim_cfg=sim_cfg, grid=grid,
                       width=width, height=height, base_seed=base_seed, n=n)


def _build_sample(i: int) -> tuple[int, int, bytes]:
    """Returns (id, seed actually used, encoded record bytes)."""
    c = _worker_ctx
    failures = []
    for attempt in range(_MAX_ATTEMPTS):
        seed = c["base_seed"] + i + attempt * c["n"]
        spec = sample_structure(seed, c["gen_cfg"])
        mask = rasterize(spec, c["width"], c["height"])
        try:
            trip = run_fdtd(mask, c["sim_cfg"], c["grid"])
        except SimulationError as e:
            failures.append(f"seed {seed}: {e}")
            continue
        if not trip.converged:
            failures.append(f"seed {seed}: no energy decay within max_steps")
            continue
        return i, seed, encode_record(mask, trip.A)
    raise DatasetError(
        f"sample {i} failed {_MAX_ATTEMPTS} attempts: " + "; ".join(failures)
    )


def generate_dataset(n: int, base_seed: int, gen_cfg: Optional[GenConfig] = None,
                     sim_cfg: Optional[SimConfig] = None,
                     grid: Optional[SpectralGrid] = None,
                     out_dir: str = ".", mask_width: int = 64,
                     mask_height: int = 64, workers: int = 1,
                     progress: bool = False) -> DatasetManifest:
    """Build records.bin and manifest.json under out_dir; returns the manifest."""
    if n < 1:
        raise DatasetError(f"need at least one sample, got n={n}")
    if workers < 1:
        raise DatasetError(f"workers must be >= 1, got {workers}")
    gen_cfg = gen_cfg if gen_cfg is not None else GenConfig()
    sim_cfg = sim_cfg if sim_cfg is not None else SimConfig()
    grid = grid if grid is not None else SpectralGrid(n_points=100)
    gen_cfg.validate()
    sim_cfg.validate()
    grid.validate()
    if mask_width < sim_cfg.lateral_cells()[0] or mask_height < sim_cfg.lateral_cells()[1]:
        raise DatasetError(
            f"mask {mask_width}x{mask_height} would be coarser than the simulation grid"
        )

    os.makedirs(out_dir, exist_ok=True)
    rec_path = os.path.join(out_dir, "records.bin")
    man_path = os.path.join(out_dir, "manifest.json")
    init_args = (gen_cfg, sim_cfg, grid, mask_width, mask_height, base_seed, n)

    entries = []
    t0 = time.time()
    try:
        with open(rec_path, "wb") as rec_fh:
            offset = 0
            if workers == 1:
                _init_worker(*init_args)
                results = map(_build_sample, range(n))
                pool = None
            else:
                # spawn, not fork: forked children inherit the solver's
                # thread-pool state mid-lock and deadlock on first use
                pool = multiprocessing.get_context("spawn").Pool(
                    workers, initializer=_init_worker, initargs=init_args)
                results = pool.imap(_build_sample, range(n))
            try:
                for i, seed, blob in results:
                    rec_fh.write(blob)
                    entries.append(ManifestEntry(
                        id=i, seed=seed, offset=offset,
                        crc32=int.from_bytes(blob[-4:], "little")))
                    offset += len(blob)
                    if progress:
                        print(f"sample {i + 1}/{n} seed={seed} "
                              f"({time.time() - t0:.1f} s elapsed)",
                              file=sys.stderr, flush=True)
            finally:
                if pool is not None:
                    pool.close()
                    pool.join()
    except BaseException:
        for path in (rec_path, man_path + ".tmp"):
            try:
                os.remove(path)
            except OSError:
                pass
        raise

    man = DatasetManifest(
        lattice_nm=sim_cfg.lattice_nm,
        film_thickness_nm=sim_cfg.film_thickness_nm,
        substrate_index=sim_cfg.substrate_index,
        metal={"eps_inf": sim_cfg.metal.eps_inf, "omega_p": sim_cfg.metal.omega_p,
               "gamma": sim_cfg.metal.gamma},
        mask_width=mask_width,
        mask_height=mask_height,
        grid=grid,
        base_seed=base_seed,
        sim_config=sim_cfg.to_dict(),
        gen_config=gen_cfg.to_dict(),
        samples=entries,
    )
    man.save(man_path)
    return man
