"""Antenna-delay calibration from DS-TWR data with known ranges.

For an exchange ``k`` initiated by tag ``i`` towards tag ``j`` the residual
as a function of the aggregate delays ``d`` is::

    e_k(d) = (d_i + K_k d_j) / 2 + [(dt41_k - K_k dt32_k) / 2 - tof_k]

with ``K_k = dt64_k / dt53_k``. Residuals are in nanoseconds and the Cauchy
loss ``log(e^2 / 2 + 1)`` has no scale parameter, so the unit choice sets
the robustness scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import Dataset, read_version
from .errors import (
    EmptyDataset,
    FormatError,
    InsufficientTags,
    MissingTruth,
    NonConvergence,
    RankDeficient,
    VersionMismatch,
)
from .sim import SPEED_OF_LIGHT

log = logging.getLogger(__name__)

LOSSES = ("l2", "cauchy")
MAX_CONDITION = 1e8


@dataclass(frozen=True)
class DelayProblem:
    tag_ids: np.ndarray  # sorted tag ids; position = unknown index
    idx_i: np.ndarray  # initiator index per exchange
    idx_j: np.ndarray  # responder index per exchange
    K: np.ndarray
    const: np.ndarray  # (dt41 - K dt32)/2 - tof, ns

    @property
    def n(self) -> int:
        return len(self.tag_ids)

    @property
    def m(self) -> int:
        return len(self.K)

    def residuals(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        return 0.5 * (d[self.idx_i] + self.K * d[self.idx_j]) + self.const

    def pair_counts(self) -> dict[tuple[int, int], int]:
        ids = self.tag_ids
        keys, counts = np.unique(np.stack([self.idx_i, self.idx_j], 1), axis=0, return_counts=True)
        return {(int(ids[a]), int(ids[b])): int(c) for (a, b), c in zip(keys, counts)}


@dataclass(frozen=True)
class PairStats:
    count: int
    mean: float
    std: float
    mode: float  # centre of the most populated histogram bin


@dataclass(frozen=True)
class DelaySolution:
    tag_ids: np.ndarray
    delays: np.ndarray  # ns
    loss_kind: str
    iterations: int
    final_cost: float
    condition_number: float
    per_pair_residual_stats: dict = field(default_factory=dict)
    converged: bool = True
    cost_history: tuple = ()

    def as_dict(self) -> dict[int, float]:
        return {int(t): float(d) for t, d in zip(self.tag_ids, self.delays)}

    def delay_of(self, tag_id: int) -> float:
        hits = np.flatnonzero(self.tag_ids == tag_id)
        if hits.size == 0:
            raise KeyError(f"tag {tag_id} not calibrated")
        return float(self.delays[hits[0]])


# --------------------------------------------------------------------------
# Truth for imported logs
# --------------------------------------------------------------------------


class TagTracks:
    """Time-stamped position tracks per tag, linearly interpolated.

    CSV layout: ``t_s,tag,x_m,y_m,z_m`` after a ``# uwbcal-tracks v1`` line.
    """

    MAGIC = "# uwbcal-tracks v1"
    HEADER = "t_s,tag,x_m,y_m,z_m"

    def __init__(self, tracks: dict[int, tuple[np.ndarray, np.ndarray]]):
        self.tracks = {}
        for tag, (t, p) in tracks.items():
            t = np.asarray(t, dtype=float)
            p = np.asarray(p, dtype=float).reshape(-1, 3)
            if len(t) != len(p) or len(t) < 2 or np.any(np.diff(t) <= 0):
                raise FormatError(f"track of tag {tag} must have >= 2 increasing samples")
            self.tracks[int(tag)] = (t, p)

    def position(self, tag: int, t) -> np.ndarray:
        if tag not in self.tracks:
            raise MissingTruth(f"no track for tag {tag}")
        ts, p = self.tracks[tag]
        t = np.asarray(t, dtype=float)
        if np.any(t < ts[0]) or np.any(t > ts[-1]):
            raise MissingTruth(f"time outside track span of tag {tag}")
        return np.stack([np.interp(t, ts, p[:, a]) for a in range(3)], axis=-1)

    def serialize(self) -> str:
        lines = [self.MAGIC, self.HEADER]
        for tag in sorted(self.tracks):
            t, p = self.tracks[tag]
            for k in range(len(t)):
                lines.append(",".join(["%.12g" % t[k], str(tag)] + ["%.12g" % v for v in p[k]]))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "TagTracks":
        lines = text.splitlines()
        if len(lines) < 2 or lines[0].strip() != cls.MAGIC or lines[1].strip() != cls.HEADER:
            raise FormatError("not a uwbcal tracks file")
        acc: dict[int, list] = {}
        for ln in lines[2:]:
            if not ln:
                continue
            f = ln.split(",")
            if len(f) != 5:
                raise FormatError(f"bad track row {ln!r}")
            acc.setdefault(int(f[1]), []).append([float(f[0]), float(f[2]), float(f[3]), float(f[4])])
        return cls({tag: (np.array(r)[:, 0], np.array(r)[:, 1:]) for tag, r in acc.items()})


def truth_ranges_from_tracks(dataset: Dataset, tracks: TagTracks) -> np.ndarray:
    """Tag separation at each exchange's start time, in metres."""
    out = np.empty(len(dataset))
    for a, b in {(int(i), int(j)) for i, j in zip(dataset.initiator, dataset.responder)}:
        sel = (dataset.initiator == a) & (dataset.responder == b)
        t = dataset.t_s[sel]
        out[sel] = np.linalg.norm(tracks.position(a, t) - tracks.position(b, t), axis=-1)
    return out


# --------------------------------------------------------------------------
# Problem construction and solution
# --------------------------------------------------------------------------


def build_problem(dataset: Dataset, truth_ranges: Optional[np.ndarray] = None) -> DelayProblem:
    """Assemble residual records from exchanges with known ranges.

    ``truth_ranges`` (m) overrides the dataset's truth columns, e.g. ranges
    interpolated from :class:`TagTracks`.
    """
    tag_ids = dataset.tag_ids
    if len(tag_ids) < 3:
        raise InsufficientTags(f"{len(tag_ids)} distinct tags; at least 3 are required for a unique solution")
    if truth_ranges is None:
        tof = dataset.truth_tof
    else:
        truth_ranges = np.asarray(truth_ranges, dtype=float)
        if truth_ranges.shape != (len(dataset),):
            raise MissingTruth("truth_ranges length differs from dataset")
        tof = truth_ranges / SPEED_OF_LIGHT
    if np.any(~np.isfinite(tof)):
        raise MissingTruth(f"{int(np.count_nonzero(~np.isfinite(tof)))} exchanges lack a truth range")
    K = dataset.intervals.ratio
    const = 0.5 * (dataset.dt41 - K * dataset.dt32) - tof
    return DelayProblem(
        tag_ids=tag_ids,
        idx_i=np.searchsorted(tag_ids, dataset.initiator),
        idx_j=np.searchsorted(tag_ids, dataset.responder),
        K=K,
        const=const,
    )


def _normal_equations(p: DelayProblem, w: np.ndarray, K: np.ndarray):
    n = p.n
    ai, aj = 0.5 * np.ones_like(K), 0.5 * K
    N = np.zeros((n, n))
    N += np.diag(np.bincount(p.idx_i, w * ai * ai, n) + np.bincount(p.idx_j, w * aj * aj, n))
    cross = np.bincount(p.idx_i * n + p.idx_j, w * ai * aj, n * n).reshape(n, n)
    N += cross + cross.T
    rhs = -(np.bincount(p.idx_i, w * ai * p.const, n) + np.bincount(p.idx_j, w * aj * p.const, n))
    return N, rhs


def design_condition(p: DelayProblem, structural: bool = False) -> float:
    """2-norm condition number of the design matrix.

    With ``structural=True`` every ``K`` is replaced by 1, exposing ranging
    graphs (e.g. bipartite ones) that only clock skew keeps barely solvable.
    """
    K = np.ones_like(p.K) if structural else p.K
    N, _ = _normal_equations(p, np.ones(p.m), K)
    ev = np.linalg.eigvalsh(N)
    if ev[0] <= ev[-1] * 1e-300 or ev[0] <= 0:
        return float("inf")
    return float(np.sqrt(ev[-1] / ev[0]))


def cauchy_cost(e) -> float:
    return float(np.sum(np.log(0.5 * np.asarray(e) ** 2 + 1.0)))


def _weighted_solve(p: DelayProblem, w: np.ndarray) -> np.ndarray:
    N, rhs = _normal_equations(p, w, p.K)
    return np.linalg.solve(N, rhs)


def solve(
    problem: DelayProblem,
    loss: str = "cauchy",
    tol: float = 1e-4,
    max_iter: int = 100,
    bin_width: float = 0.1,
    raise_on_nonconvergence: bool = False,
) -> DelaySolution:
    """Minimise the summed loss of the residuals over the delays.

    ``l2`` solves the normal equations directly. ``cauchy`` runs
    iteratively reweighted least squares from the L2 solution with weights
    ``1 / (e^2 / 2 + 1)``, stopping once no delay moves by more than
    ``tol`` ns or after ``max_iter`` reweightings. The Cauchy loss is a
    concave function of ``e^2``, so each reweighting step majorises it and
    the cost never increases.
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    cond = design_condition(problem)
    cond_struct = design_condition(problem, structural=True)
    if max(cond, cond_struct) > MAX_CONDITION:
        raise RankDeficient(f"design condition number {max(cond, cond_struct):.3g} exceeds {MAX_CONDITION:g}")

    d = _weighted_solve(problem, np.ones(problem.m))
    iterations, converged = 0, True
    history = []
    if loss == "l2":
        e = problem.residuals(d)
        cost = float(np.sum(e**2))
    else:
        e = problem.residuals(d)
        cost = cauchy_cost(e)
        history.append(cost)
        best_d, best_cost = d, cost
        converged = False
        for iterations in range(1, max_iter + 1):
            w = 1.0 / (0.5 * e**2 + 1.0)
            d_new = _weighted_solve(problem, w)
            step = np.max(np.abs(d_new - d))
            d = d_new
            e = problem.residuals(d)
            cost = cauchy_cost(e)
            history.append(cost)
            if cost <= best_cost:
                best_d, best_cost = d, cost
            if step < tol:
                converged = True
                break
        d, cost = best_d, best_cost
        e = problem.residuals(d)
        if not converged:
            log.warning("Cauchy IRLS hit the %d-iteration cap", max_iter)

    sol = DelaySolution(
        tag_ids=problem.tag_ids.copy(),
        delays=d,
        loss_kind=loss,
        iterations=iterations,
        final_cost=cost,
        condition_number=cond,
        per_pair_residual_stats=pair_stats(problem, e, bin_width),
        converged=converged,
        cost_history=tuple(history),
    )
    if not converged and raise_on_nonconvergence:
        err = NonConvergence(f"no convergence in {max_iter} iterations")
        err.solution = sol
        raise err
    return sol


def histogram_zero_centred(values, width: float):
    """Counts on bins ``[(k - 1/2) w, (k + 1/2) w)``; returns (centres, counts)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.array([]), np.array([], dtype=np.int64)
    k = np.floor(values / width + 0.5).astype(np.int64)
    lo = k.min()
    counts = np.bincount(k - lo)
    centres = (np.arange(counts.size) + lo) * width
    return centres, counts


def mode_bin(values, width: float) -> float:
    centres, counts = histogram_zero_centred(values, width)
    return float(centres[np.argmax(counts)])


def pair_stats(problem: DelayProblem, residuals, width: float = 0.1) -> dict[tuple[int, int], PairStats]:
    out = {}
    ids = problem.tag_ids
    keys = np.unique(np.stack([problem.idx_i, problem.idx_j], 1), axis=0)
    for a, b in keys:
        e = residuals[(problem.idx_i == a) & (problem.idx_j == b)]
        out[(int(ids[a]), int(ids[b]))] = PairStats(
            count=int(e.size),
            mean=float(np.mean(e)),
            std=float(np.std(e, ddof=1)) if e.size > 1 else 0.0,
            mode=mode_bin(e, width),
        )
    return out


def calibrate_new_tag(d_i_hat: float, dataset_ij: Dataset, calibrated_tag: Optional[int] = None) -> float:
    """Delay of a new tag from exchanges with one calibrated tag.

    Rows where the calibrated tag initiates are inverted as
    ``d_j = (2 tof - dt41 - d_i) / K + dt32``; rows where it responds as
    ``d_j = 2 tof - dt41 + K (dt32 - d_i)``. The per-exchange estimates are
    aggregated by their median.
    """
    if len(dataset_ij) == 0:
        raise EmptyDataset("no exchanges with the calibrated tag")
    tof = dataset_ij.truth_tof
    if np.any(~np.isfinite(tof)):
        raise MissingTruth("exchanges without truth range")
    if calibrated_tag is None:
        calibrated_tag = int(dataset_ij.initiator[0])
    K = dataset_ij.intervals.ratio
    fwd = dataset_ij.initiator == calibrated_tag
    bwd = dataset_ij.responder == calibrated_tag
    if not np.all(fwd | bwd):
        raise ValueError(f"every exchange must involve tag {calibrated_tag}")
    news = np.where(fwd, dataset_ij.responder, dataset_ij.initiator)
    if np.unique(news).size != 1:
        raise ValueError("exchanges involve more than one new tag")
    dt41, dt32 = dataset_ij.dt41, dataset_ij.dt32
    est = np.where(
        fwd,
        (2.0 * tof - dt41 - d_i_hat) / K + dt32,
        2.0 * tof - dt41 + K * (dt32 - d_i_hat),
    )
    return float(np.median(est))


# --------------------------------------------------------------------------
# Delay file
# --------------------------------------------------------------------------

DELAY_MAGIC = "# uwbcal-delays"
DELAY_VERSION = 1


def serialize_delays(sol: DelaySolution) -> str:
    lines = [f"{DELAY_MAGIC} v{DELAY_VERSION}", "tag_id,delay_ns"]
    lines += ["%d,%.17g" % (t, d) for t, d in zip(sol.tag_ids, sol.delays)]
    return "\n".join(lines) + "\n"


def parse_delays(text: str) -> dict[int, float]:
    lines = text.splitlines()
    if len(lines) < 2:
        raise FormatError("delay file too short")
    version = read_version(lines[0], DELAY_MAGIC)
    if version != DELAY_VERSION:
        raise VersionMismatch(f"delay file version {version}, expected {DELAY_VERSION}")
    if lines[1].strip() != "tag_id,delay_ns":
        raise FormatError("unexpected delay header")
    out = {}
    for ln in lines[2:]:
        if not ln:
            continue
        try:
            tag, d = ln.split(",")
            out[int(tag)] = float(d)
        except ValueError as exc:
            raise FormatError(f"bad delay row {ln!r}") from exc
    return out


def diagnostics_report(sol: DelaySolution) -> str:
    lines = [
        f"loss: {sol.loss_kind}",
        f"iterations: {sol.iterations}",
        f"converged: {sol.converged}",
        f"final_cost: {sol.final_cost:.9g}",
        f"condition_number: {sol.condition_number:.6g}",
        "pair,count,mean_ns,std_ns,mode_ns",
    ]
    for (i, j), s in sorted(sol.per_pair_residual_stats.items()):
        lines.append(f"{i}-{j},{s.count},{s.mean:.6f},{s.std:.6f},{s.mode:.6f}")
    return "\n".join(lines) + "\n"


def corrected_tof(dataset: Dataset, delays: dict[int, float]) -> np.ndarray:
    """DS ToF with antenna delays removed, ns."""
    try:
        di = np.array([delays[int(t)] for t in dataset.initiator])
        dj = np.array([delays[int(t)] for t in dataset.responder])
    except KeyError as exc:
        raise FormatError(f"no delay for tag {exc.args[0]}") from exc
    K = dataset.intervals.ratio
    return 0.5 * (dataset.dt41 - K * dataset.dt32) + 0.5 * (di + K * dj)


def write_delays(sol: DelaySolution, path) -> None:
    Path(path).write_text(serialize_delays(sol), encoding="utf-8", newline="\n")
