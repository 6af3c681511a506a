#!/usr/bin/env python3
"""
Manifold machinery on the L2 unit sphere and the preconditioned Riemannian
gradient (P-RG) iteration with staged metrics.
"""

import csv
import json
import logging
import math
import time
from collections import deque
from pathlib import Path
from typing import Any, Callable, Deque, Dict, Iterator, List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from gp_core.fields import ComplexField
from gp_core.grid import mass_inner, mass_norm
from gp_core.model import ModelInstance, energy, euclid_grad, lambda_tilde, residual_inf
from gp_core.precond import FactorizedMetric, PrecondSpec, apply_inverse, build_metric, metric_inner

logger = logging.getLogger(__name__)

SNAPSHOT_MEMORY = 50

TRACE_COLUMNS = ("n", "energy", "lambda_tilde", "lambda_p", "residual_inf", "tau", "grad_pnorm", "wall_ms")


class StageSpec(BaseModel):
    """One block of the schedule: a metric recipe, an iteration budget and a step rule"""
    precond: PrecondSpec = Field(default_factory=PrecondSpec)
    max_iter: int = Field(default=10000, ge=1)
    tau: float = Field(default=1.0, gt=0.0)
    step_rule: Literal["fixed", "optimal"] = "fixed"


class PRGConfig(BaseModel):
    stages: List[StageSpec] = Field(default_factory=lambda: [StageSpec()], min_length=1)
    tol_inf: float = Field(default=1e-12, gt=0.0)
    max_total_iter: int = Field(default=1_000_000, ge=1)
    snapshot_stride: int = Field(default=0, ge=0)
    snapshot_memory: int = Field(default=SNAPSHOT_MEMORY, ge=1)
    energy_increase_rtol: float = Field(default=1e-14, ge=0.0)


class TraceRow(NamedTuple):
    n: int
    energy: float
    lambda_tilde: float
    lambda_p: float
    residual_inf: float
    tau: float
    grad_pnorm: float
    wall_ms: float


class SnapshotStore:
    """Strided iterates: a bounded in-memory tail, older ones spilled to npz chunks.

    Without a spill directory the oldest snapshots are discarded once the
    tail is full. Iteration yields (n, values) oldest first, one chunk in
    memory at a time.
    """

    def __init__(self, memory: int = SNAPSHOT_MEMORY, spill_dir: Optional[Union[str, Path]] = None):
        self.memory = memory
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        self.tail: Deque[Tuple[int, np.ndarray]] = deque()
        self.chunks: List[Path] = []
        self.spilled = 0
        self.discarded = 0

    def append(self, n: int, values: np.ndarray):
        if len(self.tail) >= self.memory:
            if self.spill_dir is not None:
                self._spill()
            else:
                self.tail.popleft()
                self.discarded += 1
        self.tail.append((n, np.array(values, copy=True)))

    def _spill(self):
        self.spill_dir.mkdir(parents=True, exist_ok=True)
        path = self.spill_dir / f"chunk-{len(self.chunks):05d}.npz"
        ns = np.array([n for n, _ in self.tail], dtype=np.int64)
        np.savez_compressed(path, n=ns, values=np.array([v for _, v in self.tail]))
        self.chunks.append(path)
        self.spilled += len(self.tail)
        self.tail.clear()
        logger.debug(f"Spilled {ns.shape[0]} snapshots to {path}")

    def __len__(self) -> int:
        return self.spilled + len(self.tail)

    def __iter__(self) -> Iterator[Tuple[int, np.ndarray]]:
        for path in self.chunks:
            with np.load(path) as data:
                ns = data["n"].tolist()
                values = data["values"]
            yield from zip(ns, values)
        yield from list(self.tail)

    @property
    def last(self) -> Optional[Tuple[int, np.ndarray]]:
        return self.tail[-1] if self.tail else None

    def save(self, path: Union[str, Path], stride: int):
        """Index file: the in-memory tail plus chunk paths relative to it"""
        path = Path(path)
        names = []
        for chunk in self.chunks:
            try:
                names.append(str(chunk.relative_to(path.parent)))
            except ValueError:
                names.append(str(chunk.resolve()))
        ns = np.array([n for n, _ in self.tail], dtype=np.int64)
        values = np.array([v for _, v in self.tail]) if self.tail else np.zeros((0, 0))
        np.savez_compressed(path, n=ns, values=values, stride=stride, spilled=self.spilled,
                            chunks=np.array(names, dtype=str))

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["SnapshotStore", int]:
        path = Path(path)
        with np.load(path) as data:
            stride = int(data["stride"])
            ns = data["n"].tolist()
            values = list(data["values"])
            names = data["chunks"].tolist() if "chunks" in data.files else []
            spilled = int(data["spilled"]) if "spilled" in data.files else 0
        store = cls(memory=max(len(ns), 1))
        store.tail = deque(zip(ns, values))
        store.chunks = [path.parent / name for name in names]
        missing = [str(p) for p in store.chunks if not p.exists()]
        if missing:
            raise FileNotFoundError(f"Snapshot chunks missing next to {path}: {missing}")
        store.spilled = spilled
        return store, stride


class IterTrace:
    """Per-iteration records, events and strided snapshots of a P-RG run"""

    def __init__(self, snapshot_memory: int = SNAPSHOT_MEMORY, reference_energy: Optional[float] = None,
                 snapshot_dir: Optional[Union[str, Path]] = None):
        self.rows: List[TraceRow] = []
        self.events: List[Dict[str, Any]] = []
        self.snapshots = SnapshotStore(snapshot_memory, snapshot_dir)
        self.snapshot_stride = 0
        self.metadata: Dict[str, Any] = {}
        self.reference_energy = reference_energy
        self.status = "running"

    def append(self, row: TraceRow):
        if not math.isfinite(row.energy):
            raise ValueError(f"Non-finite energy at iteration {row.n}")
        if self.rows and row.n <= self.rows[-1].n:
            raise ValueError(f"Trace iterations must increase: {row.n} after {self.rows[-1].n}")
        self.rows.append(row)

    def add_event(self, kind: str, n: int, **data):
        self.events.append({"kind": kind, "n": n, **data})

    def add_snapshot(self, n: int, values: np.ndarray):
        self.snapshots.append(n, values)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        index = TRACE_COLUMNS.index(name)
        return np.array([row[index] for row in self.rows], dtype=float)

    @property
    def last(self) -> TraceRow:
        return self.rows[-1]

    @property
    def final_energy(self) -> float:
        if self.reference_energy is not None:
            return self.reference_energy
        return self.rows[-1].energy

    def energy_increases(self) -> List[Dict[str, Any]]:
        return [e for e in self.events if e["kind"] == "energy_increase"]

    def write_csv(self, path: Union[str, Path]):
        """CSV with a `# {json}` metadata line ahead of the header"""
        meta = dict(self.metadata)
        meta.update({"status": self.status, "events": self.events,
                     "snapshot_stride": self.snapshot_stride,
                     "reference_energy": self.reference_energy})
        with open(path, "w", newline="") as f:
            f.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            writer = csv.writer(f)
            writer.writerow(TRACE_COLUMNS)
            for row in self.rows:
                writer.writerow([row.n] + [f"{v:.17g}" for v in row[1:]])

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "IterTrace":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Trace file not found: {path}")
        trace = cls()
        with open(path, newline="") as f:
            first = f.readline()
            if first.startswith("#"):
                meta = json.loads(first[1:].strip() or "{}")
            else:
                meta = {}
                f.seek(0)
            reader = csv.DictReader(f)
            missing = set(TRACE_COLUMNS) - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path} is missing trace columns: {sorted(missing)}")
            for rec in reader:
                trace.append(TraceRow(int(rec["n"]), *(float(rec[c]) for c in TRACE_COLUMNS[1:])))
        trace.events = meta.pop("events", [])
        trace.status = meta.pop("status", "unknown")
        trace.snapshot_stride = int(meta.pop("snapshot_stride", 0) or 0)
        trace.reference_energy = meta.pop("reference_energy", None)
        trace.metadata = meta
        return trace

    def save_snapshots(self, path: Union[str, Path]):
        self.snapshots.save(path, self.snapshot_stride)

    def load_snapshots(self, path: Union[str, Path]):
        self.snapshots, self.snapshot_stride = SnapshotStore.load(path)


def tangent_project_L2(phi: ComplexField, v: np.ndarray) -> np.ndarray:
    """v - (phi, v)_L2 phi"""
    return v - mass_inner(phi.grid, phi.values, v) * phi.values


def riemannian_grad(model: ModelInstance, phi: ComplexField, metric: FactorizedMetric,
                    grad: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """Preconditioned Riemannian gradient and the preconditioned multiplier lambda_P"""
    h_phi = euclid_grad(model, phi) if grad is None else grad
    w_phi = model.weights * phi.values
    z_h = apply_inverse(metric, h_phi)
    z_w = apply_inverse(metric, w_phi)
    denominator = float(np.dot(w_phi, z_w))
    if not denominator > 0.0:
        raise RuntimeError(f"Broken metric: (phi, P^-1 W phi) = {denominator:.3e}")
    lam = float(np.dot(w_phi, z_h)) / denominator
    return z_h - lam * z_w, lam


def retract(phi: ComplexField, d: np.ndarray, tau: float) -> ComplexField:
    """(phi + tau d) / ||phi + tau d||_L2"""
    y = phi.values + tau * np.asarray(d)
    norm = mass_norm(phi.grid, y)
    if not (norm > 1e-300 and math.isfinite(norm)):
        raise RuntimeError(f"Retraction denominator vanished (norm={norm:.3e})")
    return ComplexField(phi.grid, y / norm)


def initial_guess(model: ModelInstance, kind: str = "gaussian", seed: int = 0,
                  vortex_m: int = 1, noise: float = 0.1) -> ComplexField:
    """exp(-r^2/2), optionally times (x+iy)^m and/or plus seeded noise, normalized.

    kinds: gaussian, vortex, random, vortex-random
    """
    if kind not in ("gaussian", "vortex", "random", "vortex-random"):
        raise ValueError(f"Unknown initial guess kind: {kind}")
    grid = model.grid
    x, y = grid.coords()
    psi = np.exp(-0.5 * (x ** 2 + y ** 2)).astype(np.complex128)
    if kind in ("vortex", "vortex-random"):
        psi = psi * (x + 1j * y) ** vortex_m
    if kind in ("random", "vortex-random"):
        rng = np.random.default_rng(seed)
        perturbation = rng.standard_normal(grid.N) + 1j * rng.standard_normal(grid.N)
        psi = psi + noise * np.max(np.abs(psi)) * perturbation
    return ComplexField.from_complex(grid, psi).normalized_copy()


def _stage_tau(stage: StageSpec, constants) -> float:
    if stage.step_rule == "fixed":
        return stage.tau
    if constants is None:
        raise ValueError("Optimal step rule needs rate constants (mu, L)")
    return float(constants.tau_opt)


def prg_run(model: ModelInstance, phi0: ComplexField, config: PRGConfig, constants: Any = None,
            on_row: Optional[Callable[[TraceRow], None]] = None,
            on_metric: Optional[Callable[[FactorizedMetric], None]] = None,
            snapshot_dir: Optional[Union[str, Path]] = None) -> Tuple[IterTrace, ComplexField]:
    """Run P-RG from phi0 through the configured stages.

    Every iterate is recorded before the stopping test, so a converged start
    yields a single row and no step. The metric is rebuilt at the current
    iterate every `refresh` steps and at every stage switch.

    `constants` is a RateConstants or a callable phi -> RateConstants; a
    callable is evaluated once, at the iterate where the first optimal-step
    stage begins.

    Snapshots beyond `snapshot_memory` are spilled to `snapshot_dir` when
    given and discarded otherwise.
    """
    if not phi0.normalized:
        raise ValueError("prg_run needs a normalized initial state")
    trace = IterTrace(snapshot_memory=config.snapshot_memory, snapshot_dir=snapshot_dir)
    trace.snapshot_stride = config.snapshot_stride
    trace.metadata["config"] = config.model_dump()

    stages = config.stages
    stage_idx = 0
    steps_in_stage = 0
    since_build = 0
    exhausted = False
    metric: Optional[FactorizedMetric] = None
    phi = phi0
    n = 0
    prev_energy: Optional[float] = None
    provider = constants if callable(constants) else None
    if provider is not None:
        constants = None
    started = time.perf_counter()

    while True:
        if not exhausted:
            while steps_in_stage >= stages[stage_idx].max_iter:
                if stage_idx + 1 >= len(stages):
                    exhausted = True
                    break
                stage_idx += 1
                steps_in_stage = 0
                metric = None
                trace.add_event("stage_switch", n, stage=stage_idx)
                logger.info(f"Switching to stage {stage_idx + 1} at iteration {n}")
        stage = stages[stage_idx]

        if metric is None or (not exhausted and since_build >= stage.precond.refresh):
            metric = build_metric(model, phi, stage.precond)
            since_build = 0
            trace.add_event("metric_build", n, stage=stage_idx, stats=metric.stats.model_dump(exclude={"build_seconds"}))
            if on_metric is not None:
                on_metric(metric)

        if stage.step_rule == "optimal" and constants is None and provider is not None:
            constants = provider(phi)
            trace.add_event("inline_spectrum", n, mu=constants.mu, L=constants.L)
        tau = _stage_tau(stage, constants)
        h_phi = euclid_grad(model, phi)
        g, lam_p = riemannian_grad(model, phi, metric, grad=h_phi)
        lam_t = lambda_tilde(model, phi, grad=h_phi)
        res = residual_inf(model, phi, grad=h_phi)
        e = energy(model, phi)
        grad_pnorm = math.sqrt(max(metric_inner(metric, g, g), 0.0))

        row = TraceRow(n, e, lam_t, lam_p, res, tau, grad_pnorm, (time.perf_counter() - started) * 1e3)
        trace.append(row)
        if on_row is not None:
            on_row(row)
        if config.snapshot_stride and n % config.snapshot_stride == 0:
            trace.add_snapshot(n, phi.values)

        if prev_energy is not None and e > prev_energy + config.energy_increase_rtol * abs(prev_energy):
            trace.add_event("energy_increase", n, delta=e - prev_energy)
            logger.warning(f"Energy increased by {e - prev_energy:.3e} at iteration {n}")
        prev_energy = e

        if res <= config.tol_inf:
            trace.status = "converged"
            break
        if exhausted:
            trace.status = "max_iter"
            break
        if n >= config.max_total_iter:
            trace.status = "iteration_cap"
            break

        phi = retract(phi, -g, tau)
        n += 1
        steps_in_stage += 1
        since_build += 1

    logger.info(
        f"P-RG finished with status {trace.status} after {n} steps: "
        f"E={trace.last.energy:.17g}, r_inf={trace.last.residual_inf:.3e}"
    )
    return trace, phi
