"""Multi-objective layer: objective vectors over (F1, step, cell size),
epsilon-dominance boxing, and non-dominated archive maintenance.

Internally every objective is maximized: the vector for a candidate is
(gamma1 * f1, -gamma2 * z1(dt), -gamma3 * z2(ds)). Boxing is additive:
component i maps to floor(v_i / eps_i); an epsilon of zero keeps the raw
value as its own box coordinate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .metrics import MetricsReport

Z_TRANSFORMS: dict[str, Callable[[float], float]] = {
    "identity": lambda v: v,
    "sqrt": math.sqrt,
    "log1p": math.log1p,
}


@dataclass(frozen=True)
class ObjectiveConfig:
    """Relative weights, monotone resolution transforms, and per-objective
    epsilon granularities (order: f1, dt, ds)."""

    gammas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    z1: str = "identity"
    z2: str = "identity"
    epsilons: tuple[float, float, float] = (0.02, 5.0, 1.0)

    def __post_init__(self) -> None:
        if any(g <= 0 for g in self.gammas):
            raise ValueError(f"gammas must be > 0: {self.gammas}")
        if any(e < 0 for e in self.epsilons):
            raise ValueError(f"epsilons must be >= 0: {self.epsilons}")
        for name in (self.z1, self.z2):
            if name not in Z_TRANSFORMS:
                raise ValueError(f"unknown transform '{name}', choose from {sorted(Z_TRANSFORMS)}")

    def to_dict(self) -> dict:
        return {"gammas": list(self.gammas), "z1": self.z1, "z2": self.z2,
                "epsilons": list(self.epsilons)}


@dataclass(frozen=True)
class Candidate:
    """One evaluated model at a specific discretization."""

    detector: str  # "cnn" | "bf"
    delta_s_km: float
    delta_t_min: float
    f1: float
    metrics: MetricsReport
    model_ref: Optional[str] = None
    rotation: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.f1 <= 1.0:
            raise ValueError(f"f1 must be in [0, 1]: {self.f1}")
        if self.delta_s_km <= 0 or self.delta_t_min <= 0:
            raise ValueError("delta_s_km and delta_t_min must be > 0")


def objective_vector(cand: Candidate, cfg: ObjectiveConfig) -> tuple[float, float, float]:
    """All-maximized objective vector (see module docstring for signs)."""
    g1, g2, g3 = cfg.gammas
    z1 = Z_TRANSFORMS[cfg.z1]
    z2 = Z_TRANSFORMS[cfg.z2]
    return (g1 * cand.f1, -g2 * z1(cand.delta_t_min), -g3 * z2(cand.delta_s_km))


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """True iff a is >= b in every component and > in at least one."""
    if len(a) != len(b):
        raise ValueError(f"objective vectors differ in length: {len(a)} vs {len(b)}")
    ge = all(x >= y for x, y in zip(a, b))
    return ge and any(x > y for x, y in zip(a, b))


def eps_box(v: Sequence[float], epsilons: Sequence[float]) -> tuple:
    """Additive box index: floor(v_i / eps_i) per component; eps_i == 0 keeps
    the raw value (so boxing degenerates to plain dominance)."""
    if len(v) != len(epsilons):
        raise ValueError("vector and epsilons differ in length")
    return tuple(
        math.floor(x / e) if e > 0 else x for x, e in zip(v, epsilons)
    )


def _utopia_distance_sq(v: Sequence[float], box: tuple, epsilons: Sequence[float]) -> float:
    """Squared distance, in normalized units v_i/eps_i, from the point to its
    box's utopia corner (the corner in the improving direction)."""
    total = 0.0
    for x, b, e in zip(v, box, epsilons):
        if e > 0:
            total += (b + 1.0 - x / e) ** 2
    return total


@dataclass
class ArchiveEntry:
    candidate: Candidate
    vector: tuple
    box: tuple


@dataclass
class InsertReport:
    accepted: bool
    reason: str
    evicted: list[Candidate] = field(default_factory=list)
    replaced: Optional[Candidate] = None


class ParetoArchive:
    """Epsilon-nondominated archive with one representative per occupied box.

    Update rule: a candidate whose box is dominated by any member's box is
    rejected; members whose boxes the candidate's box dominates are evicted;
    within the same box the point closer to the box's utopia corner wins,
    ties keeping the incumbent.
    """

    def __init__(self, cfg: ObjectiveConfig):
        self.cfg = cfg
        self.entries: list[ArchiveEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def members(self) -> list[Candidate]:
        return [e.candidate for e in self.entries]

    def boxes(self) -> set:
        return {e.box for e in self.entries}

    def insert(self, cand: Candidate) -> InsertReport:
        v = objective_vector(cand, self.cfg)
        if not all(math.isfinite(x) for x in v):
            return InsertReport(accepted=False, reason=f"non-finite objective vector {v}")
        box = eps_box(v, self.cfg.epsilons)

        for e in self.entries:
            if dominates(e.box, box):
                return InsertReport(accepted=False, reason="box dominated by an archive member")

        evicted = [e.candidate for e in self.entries if dominates(box, e.box)]
        self.entries = [e for e in self.entries if not dominates(box, e.box)]

        incumbent = next((e for e in self.entries if e.box == box), None)
        if incumbent is not None:
            if _utopia_distance_sq(v, box, self.cfg.epsilons) < _utopia_distance_sq(
                incumbent.vector, box, self.cfg.epsilons
            ):
                replaced = incumbent.candidate
                self.entries[self.entries.index(incumbent)] = ArchiveEntry(cand, v, box)
                return InsertReport(accepted=True, reason="replaced same-box incumbent",
                                    evicted=evicted, replaced=replaced)
            return InsertReport(accepted=False, reason="same-box incumbent closer to corner",
                                evicted=evicted)

        self.entries.append(ArchiveEntry(cand, v, box))
        return InsertReport(accepted=True, reason="non-dominated", evicted=evicted)

    def to_json_dict(self) -> dict:
        return {
            "objective_config": self.cfg.to_dict(),
            "members": [
                {
                    "detector": e.candidate.detector,
                    "delta_s_km": e.candidate.delta_s_km,
                    "delta_t_min": e.candidate.delta_t_min,
                    "f1": e.candidate.f1,
                    "rotation": e.candidate.rotation,
                    "model_ref": e.candidate.model_ref,
                    "objective_vector": list(e.vector),
                    "box": list(e.box),
                    "metrics": e.candidate.metrics.to_dict(),
                }
                for e in self.entries
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def archive_insert(archive: ParetoArchive, cand: Candidate) -> InsertReport:
    """Functional-style alias for :meth:`ParetoArchive.insert`."""
    return archive.insert(cand)


def eps_nondominated_boxes(vectors: Sequence[Sequence[float]], epsilons) -> set:
    """Brute-force O(n^2) reference: the set of boxes not dominated by any
    other occupied box (used as the archive oracle)."""
    boxes = [eps_box(v, epsilons) for v in vectors]
    out = set()
    for i, b in enumerate(boxes):
        if not any(dominates(other, b) for j, other in enumerate(boxes) if j != i):
            out.add(b)
    return out


def scalarize(cand: Candidate, cfg: ObjectiveConfig) -> float:
    """Weighted-sum score gamma1*f1 - gamma2*z1(dt) - gamma3*z2(ds); used for
    practitioner ranking and reporting only, never for archive pruning."""
    g1, g2, g3 = cfg.gammas
    return g1 * cand.f1 - g2 * Z_TRANSFORMS[cfg.z1](cand.delta_t_min) - g3 * Z_TRANSFORMS[cfg.z2](cand.delta_s_km)


def scalarize_normalized(candidates: Sequence[Candidate], cfg: ObjectiveConfig) -> list[float]:
    """Weighted sums after min-max normalizing each objective to [0, 1] over
    the candidate set (units of the three objectives are incomparable)."""
    if not candidates:
        return []
    z1 = Z_TRANSFORMS[cfg.z1]
    z2 = Z_TRANSFORMS[cfg.z2]
    raw = [(c.f1, -z1(c.delta_t_min), -z2(c.delta_s_km)) for c in candidates]
    lo = [min(v[i] for v in raw) for i in range(3)]
    hi = [max(v[i] for v in raw) for i in range(3)]
    scores = []
    for v in raw:
        s = 0.0
        for i in range(3):
            span = hi[i] - lo[i]
            s += cfg.gammas[i] * ((v[i] - lo[i]) / span if span > 0 else 0.0)
        scores.append(s)
    return scores
