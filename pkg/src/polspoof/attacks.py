"""Spoof generators that forge proofs by adversarially perturbing training inputs.

All three attacks share the same skeleton: choose checkpoints, then perturb
each batch (or group of k batches) with gradient descent on a noise batch R
until the update it induces is acceptable. The attacker's dataset is a copy of
the source; a row perturbed once is never rewritten, so every digest stays
valid. A source row scheduled again later is appended as a fresh copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from polspoof.data import Dataset, get_batches, sign_batch
from polspoof.diffcore import (
    DEFAULT_LAMBDA,
    NoiseModel,
    ObjectiveKind,
    WeightVector,
    input_objective_grad,
    loss_grad,
    sgd_update,
    weight_grad,
)
from polspoof.errors import NonConvergence, ScheduleError, SigmaTooSmall, SpacingExceedsDelta
from polspoof.ledger import CostLedger
from polspoof.models import InitSpec, ModelSpec, init_weights, predict
from polspoof.pol import AuxInfo, ProofBundle
from polspoof.verify import distance


@dataclass(frozen=True)
class AttackConfig:
    model: ModelSpec
    eta: float
    steps: int  # T'
    k: int
    batch_size: int
    gamma: float = 1e-3
    sigma: float | None = None
    n_max: int = 10
    eta_adv: float = 1.0  # step on R
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    steps_per_epoch: int | None = None  # S'; defaults to T'
    ordering: str = "signed"  # init_w0_matched pairing: "signed" or "magnitude"
    shape_amplitude: float = 0.0  # report-only accuracy shaping of interpolated checkpoints
    strict: bool = False  # raise NonConvergence instead of recording it (attacks II/III)
    stepper: str = "gd"
    # Attack III perturbs k*B rows against a mean gradient, so each row's share
    # of dR is k times smaller; its step is eta_adv * joint_lr_scale * k.
    joint_lr_scale: float = 1.0
    backtrack: bool = True
    # drop rows W_T misclassifies before scheduling; a saturated wrong point
    # cannot be moved far enough in n_max plain-GD iterations
    curate: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.k < 1:
            raise ScheduleError("need T' >= 1 and k >= 1")
        if self.steps % self.k:
            raise ScheduleError(f"T'={self.steps} must be a multiple of k={self.k}")
        S = self.epoch_steps
        if self.steps % S or S % self.k:
            raise ScheduleError(f"S'={S} must divide T'={self.steps} and be a multiple of k")
        if self.stepper != "gd":
            raise NotImplementedError("only plain gradient descent on R is implemented")
        if self.ordering not in ("signed", "magnitude"):
            raise ValueError(f"unknown ordering {self.ordering!r}")

    @property
    def epoch_steps(self) -> int:
        return self.steps_per_epoch or self.steps


@dataclass
class SpoofResult:
    bundle: ProofBundle
    dataset: Dataset
    ledger: CostLedger
    iterations: list[int]  # per optimized unit: step (I, II) or interval (III)
    nonconverged: list[int] = field(default_factory=list)
    grad_norm_before: list[float] = field(default_factory=list)
    grad_norm_after: list[float] = field(default_factory=list)
    perturbation_linf: list[float] = field(default_factory=list)  # mean ||R||_inf per sample, per unit
    attacker_gap: dict[int, float] = field(default_factory=dict)  # interval end -> d(W'_t, W_t)
    gamma: float | None = None
    sigma: float | None = None
    pre_run: AlphaBeta | None = None
    pre_run_ledger: CostLedger | None = None

    @property
    def dataset_id(self) -> str:
        return self.dataset.id


# -- attacker dataset --------------------------------------------------------


class _Workspace:
    def __init__(self, D: Dataset):
        self.source = D
        self.features = [D.features.copy()]
        self.labels = [D.labels.copy()]
        self.used = np.zeros(len(D), dtype=bool)
        self.size = len(D)
        self._pending_X: list[np.ndarray] = []
        self._pending_y: list[np.ndarray] = []

    def claim(self, idx: np.ndarray) -> np.ndarray:
        """Rows of the attacker dataset that will hold this batch."""
        idx = np.asarray(idx, dtype=np.int64)
        rows = idx.copy()
        reused = self.used[rows]
        self.used[rows[~reused]] = True
        n_new = int(reused.sum())
        if n_new:
            rows[reused] = np.arange(self.size, self.size + n_new)
            self._pending_X.append(self.source.features[idx[reused]])
            self._pending_y.append(self.source.labels[idx[reused]])
            self.size += n_new
        return rows

    def _flush(self):
        if self._pending_X:
            self.features.append(np.concatenate(self._pending_X))
            self.labels.append(np.concatenate(self._pending_y))
            self._pending_X, self._pending_y = [], []
            self.features = [np.concatenate(self.features)]
            self.labels = [np.concatenate(self.labels)]

    def write(self, rows: np.ndarray, X: np.ndarray) -> None:
        self._flush()
        self.features[0][rows] = X

    def finish(self) -> Dataset:
        self._flush()
        return Dataset(self.features[0], self.labels[0])


def attacker_data(D: Dataset, W_T: WeightVector, cfg: AttackConfig) -> Dataset:
    """The rows the attacker schedules: all of D, or with ``curate`` those W_T gets right.

    Curation costs one forward pass and no gradient computations.
    """
    if not cfg.curate:
        return D
    keep = np.flatnonzero(predict(cfg.model, W_T, D.features) == D.labels)
    return D if keep.size == len(D) else D.subset(keep)


def _schedule(D: Dataset, cfg: AttackConfig) -> list[np.ndarray]:
    S = cfg.epoch_steps
    out = []
    for e in range(cfg.steps // S):
        out.extend(get_batches(D, S, cfg.batch_size, seed=[cfg.seed, 0x5F00F, e]))
    return out


def _aux(cfg: AttackConfig, zeta: InitSpec) -> AuxInfo:
    S = cfg.epoch_steps
    return AuxInfo(cfg.steps // S, S, cfg.k, cfg.batch_size, float(cfg.eta), cfg.model, zeta,
                   NoiseModel())


def _l2_delta(delta) -> float:
    if isinstance(delta, Mapping):
        return float(delta["l2"])
    return float(delta)


# -- building blocks ---------------------------------------------------------


def match_order(target: np.ndarray, draws: np.ndarray, ordering: str = "signed") -> np.ndarray:
    """Place the i-th largest draw where the i-th largest target entry sits."""
    target = np.asarray(target, dtype=np.float64)
    draws = np.asarray(draws, dtype=np.float64)
    key_t, key_d = (target, draws) if ordering == "signed" else (np.abs(target), np.abs(draws))
    pos = np.argsort(-key_t, kind="stable")
    vals = draws[np.argsort(-key_d, kind="stable")]
    out = np.empty_like(vals)
    out[pos] = vals
    return out


def init_w0_matched(zeta: InitSpec, W_T: WeightVector, *, seed: int | None = None,
                    ordering: str = "signed") -> WeightVector:
    """i.i.d. draws from zeta, permuted within each tensor to track W_T's order statistics."""
    rng = np.random.default_rng(zeta.seed if seed is None else seed)
    draws = zeta.sample(W_T.shapes, rng)
    parts = [match_order(W_T.values[sl], d, ordering)
             for (_, sl), d in zip(W_T.layer_slices(), draws)]
    return W_T.with_values(np.concatenate(parts))


def interpolate_checkpoints(W0: WeightVector, W_T: WeightVector, steps: int, k: int,
                            delta: float = math.inf, *, metric: str = "l2",
                            shape_amplitude: float = 0.0, seed: int = 0) -> dict[int, WeightVector]:
    """Evenly spaced checkpoints on the segment W0 -> W_T at every multiple of k."""
    if steps < k or steps % k:
        raise ScheduleError(f"T'={steps} must be a positive multiple of k={k}")
    total = distance(metric, W0, W_T)
    spacing = total * k / steps
    if spacing > delta:
        raise SpacingExceedsDelta(spacing, delta, k * math.ceil(total / delta))
    rng = np.random.default_rng(seed)
    diff = W_T.values - W0.values
    out = {}
    for t in range(0, steps + 1, k):
        w = W0.values + (t / steps) * diff
        if shape_amplitude and 0 < t < steps:
            w = w * (1.0 + shape_amplitude * (1.0 - t / steps) * rng.standard_normal(w.shape))
        out[t] = W0.with_values(w)
    out[0], out[steps] = W0, W_T
    return out


def _perturb(model, W, X, y, R, cfg: AttackConfig, score, threshold: float,
             objective=ObjectiveKind.GRAD_NORM, lr_scale: float = 1.0, **obj_kw):
    """Gradient descent on R until ``score(g) <= threshold`` or n_max iterations.

    ``g`` is the weight gradient on X + R. The initial gradient costs one
    update; each iteration is one adversarial-optimization unit (its three
    gradient computations include the re-evaluation of g after the R step).
    With ``cfg.backtrack`` a step that does not lower the score is rejected
    and the step size halved, so the returned iterate is the best one seen.
    """
    _, g = loss_grad(model, W, X + R, y)
    g0 = float(np.linalg.norm(g))
    best = score(g)
    lr = cfg.eta_adv * lr_scale
    n = 0
    while best > threshold and n < cfg.n_max:
        _, dR = input_objective_grad(model, W, X, R, y, objective, cfg.lam, **obj_kw)
        n += 1
        R_new = R - lr * dR
        _, g_new = weight_grad(model, W, X + R_new, y)
        v = score(g_new)
        if v < best or not cfg.backtrack:
            R, g, best = R_new, g_new, min(v, best) if cfg.backtrack else v
        else:
            lr *= 0.5
    return R, g, n, g0


def _linf_per_sample(R: np.ndarray) -> float:
    return float(np.mean(np.max(np.abs(R), axis=1))) if R.size else 0.0


def _finish(ws: _Workspace, checkpoints, indices, zeta, cfg: AttackConfig, **kw) -> SpoofResult:
    D2 = ws.finish()
    digests = [sign_batch(D2, idx) for idx in indices]
    bundle = ProofBundle(checkpoints, indices, digests, _aux(cfg, zeta), D2.id)
    bundle.validate()
    return SpoofResult(bundle=bundle, dataset=D2, **kw)


# -- Attack I ------------------------------------------------------------------


def attack_one(D: Dataset, W_T: WeightVector, delta, zeta: InitSpec, cfg: AttackConfig) -> SpoofResult:
    """Honest SGD for T'-1 steps, then one batch perturbed so its update lands on W_T."""
    model, eta = cfg.model, cfg.eta
    delta = _l2_delta(delta)
    ledger = CostLedger()
    D = attacker_data(D, W_T, cfg)
    ws = _Workspace(D)
    schedule = _schedule(D, cfg)
    W = init_weights(model, zeta.with_seed(cfg.seed))
    checkpoints: dict[int, WeightVector] = {}
    indices = []
    iterations, before, after, linf = [], [], [], []
    converged = True
    with ledger.activate():
        for t in range(cfg.steps):
            if t % cfg.k == 0:
                checkpoints[t] = W
            idx = schedule[t]
            rows = ws.claim(idx)
            X, y = D.batch(idx)
            indices.append(rows)
            if t < cfg.steps - 1:
                _, g = loss_grad(model, W, X, y)
                W = sgd_update(W, g, eta)
                continue

            def score(g, W=W):
                return distance("l2", W.values - eta * g, W_T)

            R, g, n, g0 = _perturb(model, W, X, y, np.zeros_like(X), cfg, score, delta,
                                   ObjectiveKind.TARGET_DISTANCE, target=W_T, eta=eta)
            ws.write(rows, X + R)
            iterations.append(n)
            before.append(g0)
            after.append(float(np.linalg.norm(g)))
            linf.append(_linf_per_sample(R))
            converged = score(g) <= delta
    checkpoints[cfg.steps] = W_T
    result = _finish(ws, checkpoints, indices, zeta.with_seed(cfg.seed), cfg, ledger=ledger,
                     iterations=iterations, nonconverged=[] if converged else [cfg.steps - 1],
                     grad_norm_before=before, grad_norm_after=after, perturbation_linf=linf)
    if not converged:
        raise NonConvergence(
            f"final batch could not reach W_T within delta={delta:g} in {cfg.n_max} iterations",
            n_max=cfg.n_max, partial=result)
    return result


# -- Attack II -----------------------------------------------------------------


def attack_two(D: Dataset, W_T: WeightVector, delta, gamma: float | None, zeta: InitSpec,
               cfg: AttackConfig) -> SpoofResult:
    """Interpolated checkpoints; every batch perturbed until its step moves the model <= gamma."""
    model, eta, k = cfg.model, cfg.eta, cfg.k
    gamma = cfg.gamma if gamma is None else gamma
    W0 = init_w0_matched(zeta, W_T, seed=cfg.seed, ordering=cfg.ordering)
    checkpoints = interpolate_checkpoints(W0, W_T, cfg.steps, k, _l2_delta(delta),
                                          shape_amplitude=cfg.shape_amplitude, seed=cfg.seed)
    ledger = CostLedger()
    D = attacker_data(D, W_T, cfg)
    ws = _Workspace(D)
    schedule = _schedule(D, cfg)
    indices = []
    iterations, nonconv, before, after, linf = [], [], [], [], []
    gap = {}

    def score(g):
        return eta * float(np.linalg.norm(g))

    with ledger.activate():
        for t0 in range(0, cfg.steps, k):
            W = checkpoints[t0]
            for i in range(t0, t0 + k):
                idx = schedule[i]
                rows = ws.claim(idx)
                X, y = D.batch(idx)
                R, g, n, g0 = _perturb(model, W, X, y, np.zeros_like(X), cfg, score, gamma)
                if score(g) > gamma:
                    if cfg.strict:
                        raise NonConvergence(f"step {i}: movement {eta * np.linalg.norm(g):.3g} "
                                             f"> gamma={gamma:g}", n_max=cfg.n_max)
                    nonconv.append(i)
                ws.write(rows, X + R)
                indices.append(rows)
                iterations.append(n)
                before.append(g0)
                after.append(float(np.linalg.norm(g)))
                linf.append(_linf_per_sample(R))
                W = sgd_update(W, g, eta)
            gap[t0 + k] = distance("l2", W, checkpoints[t0 + k])
    return _finish(ws, checkpoints, indices, zeta.with_seed(cfg.seed), cfg, ledger=ledger,
                   iterations=iterations, nonconverged=nonconv, grad_norm_before=before,
                   grad_norm_after=after, perturbation_linf=linf, attacker_gap=gap,
                   gamma=gamma)


# -- Attack III and the sequential-replay drift bound --------------------------


def corollary_bound(eta: float, alpha: float, beta: float, k: int, gamma: float, sigma: float) -> float:
    """eta^2 alpha beta (k-1)(k-2)/2 + gamma - sigma."""
    if min(eta, alpha, beta, gamma, sigma) < 0 or k < 1:
        raise ValueError("corollary bound needs non-negative inputs and k >= 1")
    if sigma > gamma:
        raise ValueError("sigma must not exceed gamma")
    return drift_term(eta, alpha, beta, k) + gamma - sigma


def drift_term(eta: float, alpha: float, beta: float, k: int) -> float:
    return eta * eta * alpha * beta * (k - 1) * (k - 2) / 2.0


@dataclass
class AlphaBeta:
    alpha: float
    beta: float
    n_samples: int
    alpha_trace: list[float] = field(default_factory=list)  # running maxima
    beta_trace: list[float] = field(default_factory=list)


def estimate_alpha_beta(model: ModelSpec, samples, *, n_dirs: int = 2, power_iters: int = 8,
                        h: float = 1e-4, seed: int = 0,
                        ledger: CostLedger | None = None) -> AlphaBeta:
    """Running maxima of ||grad L|| and of the Hessian operator norm over (W, X, y) samples.

    The operator norm is estimated by power iteration from random unit
    directions, with Hessian-vector products taken as central differences of
    the gradient.
    """
    rng = np.random.default_rng(seed)
    alpha = beta = 0.0
    a_tr, b_tr = [], []
    n = 0
    for W, X, y in samples:
        w = W.values if isinstance(W, WeightVector) else np.asarray(W, dtype=np.float64)
        _, g = loss_grad(model, w, X, y, ledger=ledger)
        alpha = max(alpha, float(np.linalg.norm(g)))
        for _ in range(n_dirs):
            v = rng.standard_normal(w.size)
            v /= np.linalg.norm(v)
            for _ in range(power_iters):
                _, gp = loss_grad(model, w + h * v, X, y, ledger=ledger)
                _, gm = loss_grad(model, w - h * v, X, y, ledger=ledger)
                hv = (gp - gm) / (2 * h)
                nrm = float(np.linalg.norm(hv))
                beta = max(beta, nrm)
                if nrm == 0.0:
                    break
                v = hv / nrm
        n += 1
        a_tr.append(alpha)
        b_tr.append(beta)
    return AlphaBeta(alpha, beta, n, a_tr, b_tr)


def _pre_run_alpha_beta(D: Dataset, W_T: WeightVector, cfg: AttackConfig, ledger: CostLedger,
                        n_batches: int = 4) -> AlphaBeta:
    rng = np.random.default_rng([cfg.seed, 0xA1FA])
    samples = []
    for _ in range(n_batches):
        idx = rng.choice(len(D), size=cfg.batch_size, replace=False)
        X, y = D.batch(idx)
        samples.append((W_T, X, y))
    return estimate_alpha_beta(cfg.model, samples, seed=cfg.seed, ledger=ledger)


def default_sigma(D: Dataset, W_T: WeightVector, cfg: AttackConfig) -> tuple[float, AlphaBeta, CostLedger]:
    """Twice the drift term, with alpha and beta estimated at W_T on clean batches."""
    led = CostLedger()
    est = _pre_run_alpha_beta(D, W_T, cfg, led)
    return 2.0 * drift_term(cfg.eta, est.alpha, est.beta, cfg.k), est, led


def attack_three(D: Dataset, W_T: WeightVector, delta, gamma: float | None, sigma: float | None,
                 zeta: InitSpec, cfg: AttackConfig, *,
                 alpha_beta: tuple[float, float] | None = None) -> SpoofResult:
    """Like Attack II, but each interval's k batches are perturbed jointly against W_{t-k}.

    The candidate update uses learning rate k*eta on the concatenated batch and
    must land within gamma - sigma of the next checkpoint. sigma absorbs the
    drift of the verifier's sequential replay; by default it is twice the
    drift term evaluated with alpha, beta measured at W_T on clean batches.
    """
    model, eta, k = cfg.model, cfg.eta, cfg.k
    gamma = cfg.gamma if gamma is None else gamma
    sigma = cfg.sigma if sigma is None else sigma
    if alpha_beta is None:
        _, est, pre_ledger = default_sigma(D, W_T, cfg)
    else:
        est = AlphaBeta(float(alpha_beta[0]), float(alpha_beta[1]), 0)
        pre_ledger = CostLedger()
    required = drift_term(eta, est.alpha, est.beta, k)
    if sigma is None:
        sigma = 2.0 * required
        if sigma == 0.0:
            sigma = 0.5 * gamma
    if not (required < sigma < gamma) and not (k <= 2 and 0 < sigma < gamma):
        raise SigmaTooSmall(sigma, required, gamma)

    W0 = init_w0_matched(zeta, W_T, seed=cfg.seed, ordering=cfg.ordering)
    checkpoints = interpolate_checkpoints(W0, W_T, cfg.steps, k, _l2_delta(delta),
                                          shape_amplitude=cfg.shape_amplitude, seed=cfg.seed)
    ledger = CostLedger()
    D = attacker_data(D, W_T, cfg)
    ws = _Workspace(D)
    schedule = _schedule(D, cfg)
    indices = []
    iterations, nonconv, before, after, linf = [], [], [], [], []
    gap = {}
    with ledger.activate():
        for t0 in range(0, cfg.steps, k):
            W, W_next = checkpoints[t0], checkpoints[t0 + k]
            idxs = schedule[t0:t0 + k]
            rows = [ws.claim(i) for i in idxs]
            X = np.concatenate([D.features[i] for i in idxs])
            y = np.concatenate([D.labels[i] for i in idxs])

            def score(g, W=W, W_next=W_next):
                return distance("l2", W.values - k * eta * g, W_next)

            R, g, n, g0 = _perturb(model, W, X, y, np.zeros_like(X), cfg, score, gamma - sigma,
                                   lr_scale=cfg.joint_lr_scale * k)
            if score(g) > gamma - sigma:
                if cfg.strict:
                    raise NonConvergence(f"interval {t0}: joint update misses by more than "
                                         f"gamma - sigma = {gamma - sigma:g}", n_max=cfg.n_max)
                nonconv.append(t0)
            Xp = X + R
            B = cfg.batch_size
            for j, r in enumerate(rows):
                ws.write(r, Xp[j * B:(j + 1) * B])
                indices.append(r)
            iterations.append(n)
            before.append(g0)
            after.append(float(np.linalg.norm(g)))
            linf.append(_linf_per_sample(R))
            gap[t0 + k] = score(g)
    return _finish(ws, checkpoints, indices, zeta.with_seed(cfg.seed), cfg, ledger=ledger,
                   iterations=iterations, nonconverged=nonconv, grad_norm_before=before,
                   grad_norm_after=after, perturbation_linf=linf, attacker_gap=gap,
                   gamma=gamma, sigma=sigma, pre_run=est, pre_run_ledger=pre_ledger)


def replay_drift(result: SpoofResult, nm: NoiseModel = NoiseModel()) -> dict[int, float]:
    """Per interval end t: ||W_hat_t - W_t|| for the verifier's sequential replay."""
    from polspoof.verify import replay

    b = result.bundle
    return {end: distance("l2", replay(b, result.dataset, t, nm), b.checkpoints[end])
            for t, end in b.intervals()}


def replay_trajectory_samples(result: SpoofResult):
    """(W, X, y) triples along the verifier's replay, for estimating alpha and beta.

    For each interval: every replay point paired with the batch applied there,
    plus the interval's starting checkpoint paired with each of its batches.
    """
    b, D = result.bundle, result.dataset
    model, eta = b.aux.model, b.aux.eta
    for t, end in b.intervals():
        W = b.checkpoints[t]
        for i in range(t, end):
            X, y = D.batch(b.batch_indices[i])
            yield b.checkpoints[t], X, y
            if i > t:
                yield W, X, y
            _, g = weight_grad(model, W, X, y)
            W = sgd_update(W, g, eta)
