"""
File Formats
============
Strict JSON schemas for every structured file a subcommand reads or writes,
and the CSV writers for tabular series.

- AttentionRunFile: q, k, v matrices, token positions and one head config
- InstanceFile:     a DPP instance (grid, probe, keep-out, K, mesh, capacitor, band)
- PlacementFile:    {"placed": [cell, ...]}
- mesh files use config.MeshSettings

Floats in CSV are written with 17 significant digits; JSON uses the shortest
round-trip repr. Both reproduce 64-bit values exactly.
"""

import csv
import json
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.attention import AffineParams, AttentionBatch, FeatureMapConfig, GateParams, HeadConfig
from app.bench import BenchRecord
from app.config import BandSettings, CapacitorSettings, MeshSettings
from app.dpp import DppInstance
from app.kernel import DecayParams

PathLike = Union[str, Path]
Model = TypeVar("Model", bound=BaseModel)

Matrix = List[List[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# =============================================================================
# Attention
# =============================================================================

class GateFile(_Strict):
    w1: Matrix
    b1: List[float]
    w2: Matrix
    b2: List[float]

    def to_params(self) -> GateParams:
        return GateParams(np.array(self.w1), np.array(self.b1), np.array(self.w2), np.array(self.b2))


class AffineFile(_Strict):
    scale: List[float]
    shift: List[float]

    def to_params(self) -> AffineParams:
        return AffineParams(np.array(self.scale), np.array(self.shift))


class HeadFile(_Strict):
    alpha_raw_x: float = 0.0
    alpha_raw_y: float = 0.0
    alpha_min: float = 1.2
    alpha_max: float = 1.8
    epsilon: float = Field(1e-6, gt=0)
    pre_map_normalization: bool = False
    norm_q: Optional[AffineFile] = None
    norm_k: Optional[AffineFile] = None
    gate_q: Optional[GateFile] = None
    gate_k: Optional[GateFile] = None

    def to_head(self) -> HeadConfig:
        return HeadConfig(
            decay=DecayParams(self.alpha_raw_x, self.alpha_raw_y, self.alpha_min, self.alpha_max),
            feature_map=FeatureMapConfig(self.epsilon),
            gate_q=self.gate_q.to_params() if self.gate_q else None,
            gate_k=self.gate_k.to_params() if self.gate_k else None,
            pre_map_normalization=self.pre_map_normalization,
            norm_q=self.norm_q.to_params() if self.norm_q else None,
            norm_k=self.norm_k.to_params() if self.norm_k else None,
        )


class AttentionRunFile(_Strict):
    q: Matrix
    k: Matrix
    v: Matrix
    positions: Matrix = Field(..., description="One [x, y] pair per token, normalized to [0, 1]")
    head: HeadFile = HeadFile()

    def to_batch(self) -> AttentionBatch:
        return AttentionBatch(np.array(self.q, dtype=np.float64), np.array(self.k, dtype=np.float64),
                              np.array(self.v, dtype=np.float64),
                              np.array(self.positions, dtype=np.float64).reshape(-1, 2))

    @classmethod
    def from_batch(cls, batch: AttentionBatch, head: Optional[HeadFile] = None) -> "AttentionRunFile":
        return cls(q=batch.q.tolist(), k=batch.k.tolist(), v=batch.v.tolist(),
                   positions=batch.positions.tolist(), head=head or HeadFile())


# =============================================================================
# DPP
# =============================================================================

class InstanceFile(_Strict):
    width: int
    height: int
    probe: int
    keep_out: List[int] = []
    k_caps: int
    seed: int
    mesh: MeshSettings
    capacitor: CapacitorSettings = CapacitorSettings()
    band: BandSettings = BandSettings()

    def to_instance(self) -> DppInstance:
        return DppInstance(
            width=self.width, height=self.height, probe=self.probe,
            keep_out=tuple(self.keep_out), k_caps=self.k_caps,
            mesh=self.mesh.to_spec(), cap_model=self.capacitor.to_model(),
            band=self.band.to_band(), seed=self.seed,
        )

    @classmethod
    def from_instance(cls, inst: DppInstance) -> "InstanceFile":
        return cls(
            width=inst.width, height=inst.height, probe=inst.probe,
            keep_out=list(inst.keep_out), k_caps=inst.k_caps, seed=inst.seed,
            mesh=MeshSettings.from_spec(inst.mesh),
            capacitor=CapacitorSettings.from_model(inst.cap_model),
            band=BandSettings.from_band(inst.band),
        )


class PlacementFile(_Strict):
    placed: List[int]


# =============================================================================
# Reading and Writing
# =============================================================================

def read_model(path: PathLike, model: Type[Model]) -> Model:
    return model.model_validate_json(Path(path).read_text())


def write_model(path: PathLike, obj: BaseModel):
    Path(path).write_text(obj.model_dump_json(indent=2, by_alias=True) + "\n")


def write_json(path: PathLike, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def format_float(value: float) -> str:
    return f"{float(value):.17g}"


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


BENCH_COLUMNS = ("mechanism", "L", "d", "reps", "median_s", "trimmed_mean_s", "modeled_bytes")


def write_bench_csv(path: PathLike, records: Iterable[BenchRecord]):
    write_csv(path, BENCH_COLUMNS,
              ([r.mechanism, r.L, r.d, r.reps, r.median_s, r.trimmed_mean_s, r.modeled_bytes]
               for r in records))


def read_bench_csv(path: PathLike) -> List[BenchRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != BENCH_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(BENCH_COLUMNS)}")
        return [
            BenchRecord(
                mechanism=row["mechanism"], L=int(row["L"]), d=int(row["d"]), reps=int(row["reps"]),
                median_s=float(row["median_s"]), trimmed_mean_s=float(row["trimmed_mean_s"]),
                modeled_bytes=int(row["modeled_bytes"]),
            )
            for row in reader
        ]


def write_matrix_csv(path: PathLike, matrix: np.ndarray):
    header = [f"v{j}" for j in range(matrix.shape[1])]
    write_csv(path, header, matrix.tolist())
