"""The verifier: initialization test, per-epoch top-Q replay, thresholds."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np
from scipy import stats

from polspoof.data import Dataset, verify_signature
from polspoof.diffcore import NoiseModel, WeightVector, inject_noise, loss_grad, sgd_update
from polspoof.errors import (
    CalibrationError,
    DatasetMismatchError,
    NotACheckpointError,
    VerificationConfigError,
)
from polspoof.ledger import CostLedger
from polspoof.models import InitSpec, ModelSpec
from polspoof.pol import ProofBundle, train

METRICS = ("l1", "l2", "linf", "cos")

Threshold = Union[float, Sequence[float]]


def distance(metric: str, a, b) -> float:
    a = a.values if isinstance(a, WeightVector) else np.asarray(a, dtype=np.float64)
    b = b.values if isinstance(b, WeightVector) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if metric == "l1":
        return float(np.sum(np.abs(a - b)))
    if metric == "l2":
        return float(np.linalg.norm(a - b))
    if metric == "linf":
        return float(np.max(np.abs(a - b))) if a.size else 0.0
    if metric == "cos":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ValueError("cosine distance is undefined for a zero vector")
        if np.array_equal(a, b):
            return 0.0  # a @ b / (|a||b|) rounds away from 1
        return float(max(0.0, 1.0 - float(a @ b) / (na * nb)))
    raise ValueError(f"unknown metric {metric!r}")


def top_q(mag: Sequence[float], Q: int) -> list[int]:
    """Indices of the Q largest entries, largest first; ties keep the earlier index."""
    order = sorted(range(len(mag)), key=lambda i: (-mag[i], i))
    return order[:Q]


# -- initialization ----------------------------------------------------------


@dataclass
class InitTestResult:
    passed: bool
    statistic: float
    p_value: float
    per_layer: list[tuple[str, float, float]] = field(default_factory=list)


def verify_initialization(W0: WeightVector, zeta: InitSpec, alpha_sig: float = 0.01) -> InitTestResult:
    """Two-sided KS test of every parameter tensor against its zeta distribution.

    Each tensor is tested separately; the family-wise level is held at
    ``alpha_sig`` with a Bonferroni correction over the tensors.
    """
    if len(W0) < 30:
        raise ValueError("initialization test needs at least 30 parameters")
    dists = zeta.distributions(W0.shapes)
    per_layer = []
    for (name, sl), dist in zip(W0.layer_slices(), dists):
        res = stats.kstest(W0.values[sl], dist.cdf)
        per_layer.append((name, float(res.statistic), float(res.pvalue)))
    name, stat, p = min(per_layer, key=lambda r: r[2])
    passed = p >= alpha_sig / len(per_layer)
    return InitTestResult(bool(passed), stat, p, per_layer)


# -- replay ------------------------------------------------------------------


def replay(b: ProofBundle, D: Dataset, t: int, nm: NoiseModel = NoiseModel(),
           ledger: CostLedger | None = None, start: WeightVector | None = None) -> WeightVector:
    """k SGD steps from the stored W_t using the recorded batches."""
    if t not in b.checkpoints or t == b.T:
        raise NotACheckpointError(f"t={t} does not start a checkpoint interval")
    W = b.checkpoints[t] if start is None else start
    model, eta = b.aux.model, b.aux.eta
    for i in range(t, min(t + b.k, b.T)):
        X, y = D.batch(b.batch_indices[i])
        _, g = loss_grad(model, W, X, y, ledger=ledger)
        W = sgd_update(W, inject_noise(g, nm, i), eta)
    return W


def reproduction_error(b: ProofBundle, D: Dataset, t: int, metric: str = "l2",
                       nm: NoiseModel = NoiseModel()) -> float:
    end = min(t + b.k, b.T)
    return distance(metric, replay(b, D, t, nm), b.checkpoints[end])


# -- configuration and report ------------------------------------------------


@dataclass
class VerificationConfig:
    """``delta`` maps metric -> constant threshold or per-stage schedule.

    A schedule of m entries splits training into m equal fractions; the
    interval starting at step t uses entry floor(m * t / T).
    """

    delta: dict[str, Threshold]
    Q: int = 1
    metrics: tuple[str, ...] = METRICS
    alpha_sig: float = 0.01
    mag_metric: str = "l2"
    workers: int = 1
    fail_fast: bool = False

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        for m in self.metrics:
            if m not in METRICS:
                raise VerificationConfigError(f"unknown metric {m!r}")
            if m not in self.delta:
                raise VerificationConfigError(f"no threshold configured for metric {m!r}")
        if self.Q < 1:
            raise VerificationConfigError("Q must be >= 1")

    def threshold(self, metric: str, t: int, T: int) -> float:
        d = self.delta[metric]
        if isinstance(d, (int, float)):
            return float(d)
        d = list(d)
        stage = min(len(d) - 1, (len(d) * t) // max(T, 1))
        return float(d[stage])

    def to_dict(self) -> dict:
        return {"delta": {m: (v if isinstance(v, (int, float)) else list(v))
                          for m, v in self.delta.items()},
                "Q": self.Q, "metrics": list(self.metrics), "alpha_sig": self.alpha_sig,
                "mag_metric": self.mag_metric}


class FailureKind(enum.Enum):
    INIT = "init"
    SIGNATURE = "signature"
    DISTANCE = "distance"


@dataclass
class Failure:
    kind: FailureKind
    t: int | None = None
    metric: str | None = None
    value: float | None = None
    threshold: float | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "t": self.t, "metric": self.metric,
                "value": self.value, "threshold": self.threshold, "detail": self.detail}


@dataclass
class IntervalResult:
    t: int
    end: int
    errors: dict[str, float]
    signatures_ok: bool


@dataclass
class VerificationReport:
    passed: bool
    init: InitTestResult
    selected: dict[int, list[int]]  # epoch -> interval start steps, largest movement first
    mags: dict[int, list[float]]
    intervals: dict[int, IntervalResult]
    failures: list[Failure]
    ledger: CostLedger

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def max_errors(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.intervals.values():
            for m, v in r.errors.items():
                out[m] = max(out.get(m, 0.0), v)
        return out

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "init": {"passed": self.init.passed, "statistic": self.init.statistic,
                     "p_value": self.init.p_value,
                     "per_layer": [list(r) for r in self.init.per_layer]},
            "selected": {str(e): v for e, v in self.selected.items()},
            "mags": {str(e): v for e, v in self.mags.items()},
            "intervals": {str(t): {"end": r.end, "errors": r.errors,
                                   "signatures_ok": r.signatures_ok}
                          for t, r in sorted(self.intervals.items())},
            "failures": [f.to_dict() for f in self.failures],
            "ledger": self.ledger.to_dict(),
        }


def epoch_intervals(b: ProofBundle) -> dict[int, list[tuple[int, int]]]:
    out: dict[int, list[tuple[int, int]]] = {}
    for t, end in b.intervals():
        out.setdefault(t // b.aux.S, []).append((t, end))
    return out


def _check_interval(b, D, t, end, cfg, nm, ledger) -> IntervalResult:
    sig_ok = all(verify_signature(D, b.batch_indices[i], b.digests[i]) for i in range(t, end))
    W = replay(b, D, t, nm, ledger)
    errors = {m: distance(m, W, b.checkpoints[end]) for m in cfg.metrics}
    return IntervalResult(t, end, errors, sig_ok)


def verify_proof(b: ProofBundle, D: Dataset, cfg: VerificationConfig,
                 nm: NoiseModel = NoiseModel()) -> VerificationReport:
    if b.dataset_id != D.id:
        raise DatasetMismatchError(f"bundle references dataset {b.dataset_id}, got {D.id}")
    b.validate()
    per_epoch = b.aux.S // b.k
    if cfg.Q > per_epoch:
        raise VerificationConfigError(f"Q={cfg.Q} exceeds floor(S/k)={per_epoch}")
    ledger = CostLedger()
    failures: list[Failure] = []
    init = verify_initialization(b.checkpoints[0], b.aux.init, cfg.alpha_sig)
    report = VerificationReport(init.passed, init, {}, {}, {}, failures, ledger)
    if not init.passed:
        failures.append(Failure(FailureKind.INIT, 0, value=init.p_value, threshold=cfg.alpha_sig,
                                detail=f"KS statistic {init.statistic:.4g}"))
        report.passed = False
        if cfg.fail_fast:
            return report

    with ledger.activate():
        for epoch, ivs in sorted(epoch_intervals(b).items()):
            mag = [distance(cfg.mag_metric, b.checkpoints[end], b.checkpoints[t]) for t, end in ivs]
            chosen = [ivs[i] for i in top_q(mag, cfg.Q)]
            report.mags[epoch] = mag
            report.selected[epoch] = [t for t, _ in chosen]
            if cfg.workers > 1:
                with ThreadPoolExecutor(cfg.workers) as pool:
                    results = list(pool.map(
                        lambda iv: _check_interval(b, D, iv[0], iv[1], cfg, nm, ledger), chosen))
            else:
                results = [_check_interval(b, D, t, end, cfg, nm, ledger) for t, end in chosen]
            for r in results:
                report.intervals[r.t] = r
                if not r.signatures_ok:
                    failures.append(Failure(FailureKind.SIGNATURE, r.t,
                                            detail="batch digest mismatch in interval"))
                for m, v in r.errors.items():
                    thr = cfg.threshold(m, r.t, b.T)
                    if not v <= thr:
                        failures.append(Failure(FailureKind.DISTANCE, r.t, m, v, thr))
            if failures and cfg.fail_fast:
                break
    report.passed = not failures
    return report


def interval_errors(b: ProofBundle, D: Dataset, nm: NoiseModel = NoiseModel(),
                    metrics: Sequence[str] = METRICS) -> dict[int, dict[str, float]]:
    """Reproduction error of every stored interval (no top-Q selection)."""
    out = {}
    for t, end in b.intervals():
        W = replay(b, D, t, nm)
        out[t] = {m: distance(m, W, b.checkpoints[end]) for m in metrics}
    return out


def normalized_errors(b: ProofBundle, D: Dataset, cfg: VerificationConfig,
                      d_ref: Mapping[str, float], nm: NoiseModel = NoiseModel()) -> dict[str, float]:
    """max_t eps_repr(t) / d_ref per metric, over the intervals the verifier selects."""
    per_epoch = b.aux.S // b.k
    ts: list[int] = []
    for _, ivs in sorted(epoch_intervals(b).items()):
        mag = [distance(cfg.mag_metric, b.checkpoints[e], b.checkpoints[t]) for t, e in ivs]
        ts.extend(ivs[i][0] for i in top_q(mag, min(cfg.Q, per_epoch)))
    worst = {m: 0.0 for m in cfg.metrics}
    for t in ts:
        end = min(t + b.k, b.T)
        W = replay(b, D, t, nm)
        for m in cfg.metrics:
            worst[m] = max(worst[m], distance(m, W, b.checkpoints[end]))
    return {m: worst[m] / d_ref[m] for m in cfg.metrics}


# -- reference distance and calibration -------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    E: int
    S: int
    batch_size: int
    eta: float


def compute_d_ref(model: ModelSpec, zeta: InitSpec, D: Dataset, tc: TrainConfig,
                  seeds: tuple[int, int] = (1, 2), nm: NoiseModel = NoiseModel(),
                  metrics: Sequence[str] = METRICS) -> dict[str, float]:
    """Distance between two final models trained with different init and batching seeds."""
    finals = [train(D, model, zeta.with_seed(s), E=tc.E, S=tc.S, batch_size=tc.batch_size,
                    eta=tc.eta, batch_seed=s, nm=nm) for s in seeds]
    return {m: distance(m, finals[0], finals[1]) for m in metrics}


def stage_maxima(errors: Mapping[int, Mapping[str, float]], T: int, stages: int,
                 metrics: Sequence[str] = METRICS) -> dict[str, list[float]]:
    out = {m: [0.0] * stages for m in metrics}
    for t, errs in errors.items():
        s = min(stages - 1, (stages * t) // max(T, 1))
        for m in metrics:
            out[m][s] = max(out[m][s], errs[m])
    return out


def calibrate_delta(max_eps: Mapping[str, Threshold], d_ref: Mapping[str, float]) -> dict[str, Threshold]:
    """Thresholds between the honest reproduction error and d_ref.

    Constant: the geometric mean of (max eps, d_ref). Staged (a list of
    per-stage maxima): each stage gets the same multiplier sqrt(d_ref / max eps)
    applied to the largest error at or after that stage, so the schedule is
    non-increasing and every honest stage stays below its threshold.
    """
    out: dict[str, Threshold] = {}
    for m, eps in max_eps.items():
        ref = float(d_ref[m])
        if isinstance(eps, (int, float)):
            if not eps < ref:
                raise CalibrationError(f"{m}: max reproduction error {eps:.4g} >= d_ref {ref:.4g}")
            out[m] = math.sqrt(eps * ref)
            continue
        eps = [float(e) for e in eps]
        top = max(eps)
        if not top < ref:
            raise CalibrationError(f"{m}: max reproduction error {top:.4g} >= d_ref {ref:.4g}")
        if top == 0.0:
            out[m] = [0.0] * len(eps)
            continue
        mult = math.sqrt(ref / top)
        tail = np.maximum.accumulate(np.asarray(eps)[::-1])[::-1]
        out[m] = [float(mult * e) for e in tail]
    return out
