"""Scenario presets, synthetic dataset generation, and dataset persistence.

Channels are drawn per sample from Rician fading (direct links at unit mean
power, inter-cell links attenuated by the scenario's cross-power ratio) and
stored at 32-bit precision; all computation happens in float64 on values that
are exactly representable in float32, so write/read round-trips are bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from isacfl.channel import RngStream, sample_rcs, sample_rician
from isacfl.metrics import ChannelSample, Scenario

DATASET_MAGIC = "isacfl-dataset"
DATASET_VERSION = 1

SCENARIO_VARIANTS = (
    "homogeneous",
    "heterogeneous",
    "equal_ue_homogeneous",
    "equal_ue_heterogeneous",
)

# rng stream sub-domains inside one sample
_DRAW_DIRECT = 0
_DRAW_CROSS = 1000
_DRAW_THETA = 2000
_DRAW_BETA = 2001
_DRAW_RADAR = 3000


class DatasetFormatError(ValueError):
    """The file is not a recognizable dataset."""


class DatasetVersionError(DatasetFormatError):
    """The file was written by an incompatible format version."""


def build_scenario(variant: str, n_t: int = 8, n_r: int = 8, **overrides) -> Scenario:
    """Three-cell deployment for a named experiment variant.

    Heterogeneous variants spread the comm/sensing trade-off weights across
    BSs; the equal-UE variants pin every cell to two users.
    """
    if variant not in SCENARIO_VARIANTS:
        raise ValueError(f"unknown scenario variant {variant!r}; choose from {SCENARIO_VARIANTS}")
    k = (2, 2, 2) if variant.startswith("equal_ue") else (2, 3, 4)
    rho = (0.2, 0.6, 0.8) if variant.endswith("heterogeneous") else (0.5, 0.5, 0.5)
    return Scenario(
        n_cells=3,
        n_t=n_t,
        n_r=n_r,
        k_per_cell=k,
        rho_per_cell=rho,
        rician_k=3.0,
        **overrides,
    )


def build_paper_scenario(variant: str) -> Scenario:
    """Full-scale variant: 8x8 antennas, three cells."""
    return build_scenario(variant, n_t=8, n_r=8)


@dataclass
class BsDataset:
    """All channel draws of one BS, stacked over samples.

    The first ``n_train`` samples are the training stream; the tail is the
    held-out evaluation slice (also used for the aggregation-weight posterior).
    """

    scenario: Scenario
    cell: int
    seed: int
    n_train: int
    comm_direct: np.ndarray             # (n, k_m, n_t) complex128, f32-exact
    comm_cross: dict[int, np.ndarray]   # i -> (n, k_m, n_t)
    radar_cross: dict[int, np.ndarray]  # n -> (n, n_r, n_t)
    target_theta: np.ndarray            # (n,) float64, f32-exact
    target_beta: np.ndarray             # (n,) complex128, f32-exact

    @property
    def n_samples(self) -> int:
        return self.comm_direct.shape[0]

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(self.n_train)

    @property
    def eval_indices(self) -> np.ndarray:
        return np.arange(self.n_train, self.n_samples)

    def sample(self, i: int) -> ChannelSample:
        return ChannelSample(
            cell=self.cell,
            comm_direct=self.comm_direct[i],
            comm_cross={j: a[i] for j, a in self.comm_cross.items()},
            target_theta=float(self.target_theta[i]),
            target_beta=complex(self.target_beta[i]),
            radar_cross={j: a[i] for j, a in self.radar_cross.items()},
        )


def _f32_exact(arr: np.ndarray) -> np.ndarray:
    """Round to float32 precision but keep float64/complex128 dtype."""
    if np.iscomplexobj(arr):
        return arr.astype(np.complex64).astype(np.complex128)
    return arr.astype(np.float32).astype(np.float64)


def generate_bs_dataset(scn: Scenario, m: int, n_samples: int, seed: int) -> BsDataset:
    """Synthesize one BS's channel dataset, deterministic per (scenario, seed)."""
    if n_samples < 10:
        raise ValueError("n_samples must be >= 10 so the train/eval split is non-degenerate")
    k_m = scn.k_per_cell[m]
    others = [i for i in range(scn.n_cells) if i != m]
    comm_direct = np.empty((n_samples, k_m, scn.n_t), dtype=np.complex128)
    comm_cross = {i: np.empty((n_samples, k_m, scn.n_t), dtype=np.complex128) for i in others}
    radar_cross = {i: np.empty((n_samples, scn.n_r, scn.n_t), dtype=np.complex128) for i in others}
    theta = np.empty(n_samples)
    beta = np.empty(n_samples, dtype=np.complex128)

    bs_rng = RngStream(seed).child(m)
    for s in range(n_samples):
        rng = bs_rng.child(s)
        for k in range(k_m):
            comm_direct[s, k] = sample_rician(rng.child(_DRAW_DIRECT + k), 1, scn.n_t, scn.rician_k, 1.0)[0]
        for i in others:
            for k in range(k_m):
                comm_cross[i][s, k] = sample_rician(
                    rng.child(_DRAW_CROSS + i * scn.k_max + k), 1, scn.n_t, scn.rician_k, scn.cross_power_ratio
                )[0]
        theta[s] = rng.child(_DRAW_THETA).generator().uniform(-np.pi / 2, np.pi / 2)
        beta[s] = sample_rcs(rng.child(_DRAW_BETA), scn.alpha_s)
        for i in others:
            radar_cross[i][s] = sample_rician(
                rng.child(_DRAW_RADAR + i), scn.n_r, scn.n_t, scn.rician_k, scn.cross_power_ratio
            )
    n_train = int(n_samples * 0.9)
    return BsDataset(
        scenario=scn,
        cell=m,
        seed=seed,
        n_train=n_train,
        comm_direct=_f32_exact(comm_direct),
        comm_cross={i: _f32_exact(a) for i, a in comm_cross.items()},
        radar_cross={i: _f32_exact(a) for i, a in radar_cross.items()},
        target_theta=_f32_exact(theta),
        target_beta=_f32_exact(beta),
    )


def generate_dataset(scn: Scenario, n_samples: int, seed: int) -> list[BsDataset]:
    """Per-BS datasets for the whole deployment."""
    return [generate_bs_dataset(scn, m, n_samples, seed) for m in range(scn.n_cells)]


# ---------------------------------------------------------------------------
# Persistence: JSON header + length-prefixed little-endian float32 arrays,
# complex values stored as interleaved re/im pairs.


def _scenario_to_dict(scn: Scenario) -> dict:
    return {
        "n_cells": scn.n_cells,
        "n_t": scn.n_t,
        "n_r": scn.n_r,
        "k_per_cell": list(scn.k_per_cell),
        "rho_per_cell": list(scn.rho_per_cell),
        "sigma_c_sq": scn.sigma_c_sq,
        "sigma_s_sq": scn.sigma_s_sq,
        "p_t": scn.p_t,
        "alpha_s": scn.alpha_s,
        "rician_k": scn.rician_k,
        "element_spacing": scn.element_spacing,
        "cross_power_ratio": scn.cross_power_ratio,
    }


def _scenario_from_dict(d: dict) -> Scenario:
    return Scenario(
        n_cells=d["n_cells"],
        n_t=d["n_t"],
        n_r=d["n_r"],
        k_per_cell=tuple(d["k_per_cell"]),
        rho_per_cell=tuple(d["rho_per_cell"]),
        sigma_c_sq=d["sigma_c_sq"],
        sigma_s_sq=d["sigma_s_sq"],
        p_t=d["p_t"],
        alpha_s=d["alpha_s"],
        rician_k=d["rician_k"],
        element_spacing=d["element_spacing"],
        cross_power_ratio=d["cross_power_ratio"],
    )


def _write_f32(fh, arr: np.ndarray) -> None:
    if np.iscomplexobj(arr):
        flat = np.ascontiguousarray(arr.astype(np.complex64)).view(np.float32).ravel()
    else:
        flat = np.ascontiguousarray(arr, dtype=np.float32).ravel()
    fh.write(struct.pack("<Q", flat.size))
    fh.write(flat.astype("<f4").tobytes())


def _read_f32(fh, complex_: bool, shape: tuple[int, ...]) -> np.ndarray:
    raw = fh.read(8)
    if len(raw) != 8:
        raise DatasetFormatError("truncated dataset file (missing array length)")
    (count,) = struct.unpack("<Q", raw)
    buf = fh.read(count * 4)
    if len(buf) != count * 4:
        raise DatasetFormatError("truncated dataset file (short array body)")
    flat = np.frombuffer(buf, dtype="<f4")
    if complex_:
        arr = flat.view(np.complex64).astype(np.complex128)
    else:
        arr = flat.astype(np.float64)
    try:
        return arr.reshape(shape)
    except ValueError as exc:
        raise DatasetFormatError(f"array size {arr.size} does not match declared shape {shape}") from exc


def write_bs_dataset(path, ds: BsDataset) -> None:
    header = {
        "format": DATASET_MAGIC,
        "version": DATASET_VERSION,
        "cell": ds.cell,
        "seed": ds.seed,
        "n_samples": ds.n_samples,
        "n_train": ds.n_train,
        "k_m": ds.scenario.k_per_cell[ds.cell],
        "scenario": _scenario_to_dict(ds.scenario),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        _write_f32(fh, ds.comm_direct)
        for i in sorted(ds.comm_cross):
            _write_f32(fh, ds.comm_cross[i])
        _write_f32(fh, ds.target_theta)
        _write_f32(fh, ds.target_beta)
        for i in sorted(ds.radar_cross):
            _write_f32(fh, ds.radar_cross[i])


def read_bs_dataset(path) -> BsDataset:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise DatasetFormatError(f"{path}: file too short to hold a header")
        (hlen,) = struct.unpack("<Q", raw)
        if hlen > 1 << 20:
            raise DatasetFormatError(f"{path}: implausible header length {hlen}")
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"{path}: corrupted header") from exc
        if header.get("format") != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset file")
        if header.get("version") != DATASET_VERSION:
            raise DatasetVersionError(
                f"{path}: format version {header.get('version')} not supported (expected {DATASET_VERSION})"
            )
        scn = _scenario_from_dict(header["scenario"])
        m = header["cell"]
        n = header["n_samples"]
        k_m = scn.k_per_cell[m]
        others = [i for i in range(scn.n_cells) if i != m]
        comm_direct = _read_f32(fh, True, (n, k_m, scn.n_t))
        comm_cross = {i: _read_f32(fh, True, (n, k_m, scn.n_t)) for i in others}
        theta = _read_f32(fh, False, (n,))
        beta = _read_f32(fh, True, (n,))
        radar_cross = {i: _read_f32(fh, True, (n, scn.n_r, scn.n_t)) for i in others}
    return BsDataset(
        scenario=scn,
        cell=m,
        seed=header["seed"],
        n_train=header["n_train"],
        comm_direct=comm_direct,
        comm_cross=comm_cross,
        radar_cross=radar_cross,
        target_theta=theta,
        target_beta=beta,
    )


def write_dataset(directory, datasets: list[BsDataset]) -> list[Path]:
    """Write one ``bs<m>.ds`` file per BS under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for ds in datasets:
        path = directory / f"bs{ds.cell}.ds"
        write_bs_dataset(path, ds)
        paths.append(path)
    return paths


def read_dataset(directory) -> list[BsDataset]:
    """Read every ``bs<m>.ds`` file under ``directory``, ordered by cell."""
    directory = Path(directory)
    paths = sorted(directory.glob("bs*.ds"))
    if not paths:
        raise DatasetFormatError(f"no bs*.ds files under {directory}")
    datasets = [read_bs_dataset(p) for p in paths]
    datasets.sort(key=lambda d: d.cell)
    scn = datasets[0].scenario
    if [d.cell for d in datasets] != list(range(scn.n_cells)):
        raise DatasetFormatError(f"{directory}: expected one file per cell 0..{scn.n_cells - 1}")
    return datasets
