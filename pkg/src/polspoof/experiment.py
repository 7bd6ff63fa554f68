"""Scenario configs, the end-to-end experiment runner and its CSV output.

A scenario is a YAML (or JSON) mapping::

    name: blobs-desk
    seed: 0                 # honest init + batching seed; attack cells derive from it
    dataset: {kind: blobs, n: 2000, dim: 10, classes: 2, spread: 1.0, separation: 3.0, seed: 0}
    split: {fraction: 0.5, seed: 0}      # optional: proof on the first part, spoofs on the second
    model: {widths: [10, 64, 2], activation: tanh, loss: cross_entropy, bias: true}
    init: {family: gaussian, std: [0.316, 0.316, 0.6, 0.1]}
    proof: {E: 200, S: 60, k: 5, batch_size: 32, eta: 0.5}
    noise: {amplitude: 0.001, seed: 5}    # prover side
    verifier: {noise_seed: 99, Q: null, metrics: [l1, l2, linf, cos], alpha_sig: 0.01, stages: null}
    dref: {seeds: [1, 2]}
    adversary: {n_max: 10, eta_adv: 30.0, lam: 0.01, steps_per_epoch: null, curate: false}
    attacks:
      - {attack: 2, steps: [1200, 2400], gamma: 0.002}
      - {attack: 3, steps: [2400], gamma_margin: 0.01}   # gamma = sigma + margin
    repeats: 5

``dataset`` may instead be ``{path: data.csv}`` (or a ``.pold`` file).
``verifier.Q: null`` means floor(S/k), i.e. every interval is replayed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from polspoof import attacks as atk
from polspoof.data import Dataset, load_dataset, make_blobs, make_moons, split_disjoint
from polspoof.diffcore import NoiseModel
from polspoof.errors import AttackError, NonConvergence, PolError
from polspoof.ledger import CostLedger
from polspoof.models import InitSpec, ModelSpec, evaluate
from polspoof.pol import ProofBundle, bundle_size, create_proof
from polspoof.verify import (
    METRICS,
    TrainConfig,
    VerificationConfig,
    VerificationReport,
    calibrate_delta,
    compute_d_ref,
    interval_errors,
    stage_maxima,
    verify_proof,
)

CSV_COLUMNS = (
    "scenario", "row_id", "proof_row", "row_type", "attack", "steps", "gamma", "metric", "repeats",
    "normalized_error_proof", "normalized_error_spoof", "max_error", "threshold",
    "gradient_computations", "opt_iterations", "honest_steps", "cost_ratio",
    "bundle_bytes", "pass_rate", "passed", "status",
)


class ScenarioError(PolError, ValueError):
    pass


@dataclass(frozen=True)
class AttackGrid:
    attack: int
    steps: tuple[int, ...]
    gamma: float | None = None
    gamma_margin: float | None = None  # attack III: gamma = sigma + margin
    sigma: float | None = None
    delta: float | None = None  # defaults to the calibrated l2 threshold

    @classmethod
    def from_dict(cls, d: dict) -> AttackGrid:
        a = int(d["attack"])
        if a not in (1, 2, 3):
            raise ScenarioError(f"attack must be 1, 2 or 3, got {a}")
        steps = d["steps"]
        steps = tuple(int(s) for s in (steps if isinstance(steps, (list, tuple)) else [steps]))
        opt = {k: (None if d.get(k) is None else float(d[k]))
               for k in ("gamma", "gamma_margin", "sigma", "delta")}
        return cls(a, steps, **opt)


@dataclass
class Scenario:
    name: str
    seed: int
    dataset: dict
    model: ModelSpec
    init: InitSpec
    E: int
    S: int
    k: int
    batch_size: int
    eta: float
    noise: NoiseModel = NoiseModel()
    verifier_noise_seed: int = 99
    Q: int | None = None
    metrics: tuple[str, ...] = METRICS
    alpha_sig: float = 0.01
    stages: int | None = None
    dref_seeds: tuple[int, int] = (1, 2)
    adversary: dict = field(default_factory=dict)
    attacks: tuple[AttackGrid, ...] = ()
    repeats: int = 5
    split: dict | None = None
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        try:
            proof = d["proof"]
            model = ModelSpec.from_dict(d["model"])
            init_d = dict(d.get("init", {}))
            seed = int(d.get("seed", 0))
            init_d.setdefault("seed", seed)
            ver = d.get("verifier") or {}
            noise = d.get("noise") or {}
            return cls(
                name=str(d.get("name", "scenario")),
                seed=seed,
                dataset=dict(d["dataset"]),
                model=model,
                init=InitSpec.from_dict(init_d),
                E=int(proof["E"]), S=int(proof["S"]), k=int(proof["k"]),
                batch_size=int(proof["batch_size"]), eta=float(proof["eta"]),
                noise=NoiseModel(float(noise.get("amplitude", 0.0)), int(noise.get("seed", 0))),
                verifier_noise_seed=int(ver.get("noise_seed", 99)),
                Q=None if ver.get("Q") is None else int(ver["Q"]),
                metrics=tuple(ver.get("metrics", METRICS)),
                alpha_sig=float(ver.get("alpha_sig", 0.01)),
                stages=None if ver.get("stages") is None else int(ver["stages"]),
                dref_seeds=tuple(int(s) for s in (d.get("dref") or {}).get("seeds", (1, 2))),
                adversary=dict(d.get("adversary") or {}),
                attacks=tuple(AttackGrid.from_dict(a) for a in d.get("attacks") or ()),
                repeats=int(d.get("repeats", 5)),
                split=d.get("split"),
                workers=int(d.get("workers", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, PolError):
                raise
            raise ScenarioError(f"invalid scenario: {exc!r}") from None

    def with_overrides(self, *, seed: int | None = None, noise: float | None = None,
                       metrics=None, repeats: int | None = None, workers: int | None = None) -> Scenario:
        s = self
        if seed is not None:
            s = replace(s, seed=seed, init=s.init.with_seed(seed))
        if noise is not None:
            s = replace(s, noise=NoiseModel(float(noise), s.noise.seed))
        if metrics:
            s = replace(s, metrics=tuple(metrics))
        if repeats is not None:
            s = replace(s, repeats=repeats)
        if workers is not None:
            s = replace(s, workers=workers)
        return s

    @property
    def T(self) -> int:
        return self.E * self.S

    @property
    def verifier_noise(self) -> NoiseModel:
        return NoiseModel(self.noise.amplitude, self.verifier_noise_seed)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.E, self.S, self.batch_size, self.eta)

    def verification_config(self, delta: dict) -> VerificationConfig:
        Q = self.Q if self.Q is not None else self.S // self.k
        return VerificationConfig(delta, Q=Q, metrics=self.metrics, alpha_sig=self.alpha_sig)


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if not isinstance(d, dict):
        raise ScenarioError(f"{path}: expected a mapping at top level")
    return Scenario.from_dict(d)


def build_dataset(spec: dict, base: Path | None = None) -> Dataset:
    if "path" in spec:
        p = Path(spec["path"])
        if base is not None and not p.is_absolute():
            p = base / p
        return load_dataset(p)
    kind = spec.get("kind", "blobs")
    args = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "blobs":
        return make_blobs(**args)
    if kind == "moons":
        return make_moons(**args)
    raise ScenarioError(f"unknown dataset kind {kind!r}")


def proof_and_attack_data(sc: Scenario, base: Path | None = None) -> tuple[Dataset, Dataset]:
    D = build_dataset(sc.dataset, base)
    if not sc.split:
        return D, D
    return split_disjoint(D, float(sc.split.get("fraction", 0.5)), int(sc.split.get("seed", 0)))


# -- results -----------------------------------------------------------------


@dataclass
class ProofSummary:
    T: int
    d_ref: dict[str, float]
    max_eps: dict[str, float]
    delta: dict
    normalized: dict[str, float]
    passed: bool
    bundle_bytes: int
    accuracy: float


@dataclass
class SpoofCell:
    attack: int
    steps: int
    repeat: int
    seed: int
    grid: int = 0  # index into Scenario.attacks
    gamma: float | None = None
    status: str = "ok"
    detail: str = ""
    normalized: dict[str, float] = field(default_factory=dict)
    max_errors: dict[str, float] = field(default_factory=dict)
    passed: bool = False
    gradient_computations: int = 0
    opt_iterations: int = 0
    bundle_bytes: int = 0


@dataclass
class ExperimentRecord:
    scenario: str
    proof: ProofSummary
    cells: list[SpoofCell]
    rows: list[dict]
    ledgers: dict[str, CostLedger]

    @property
    def total_ledger(self) -> CostLedger:
        total = CostLedger()
        for led in self.ledgers.values():
            total.merge(led)
        return total

    def grid(self) -> dict[tuple[int, int, int], bool]:
        """(grid index, attack, T') -> every repeat passed with errors <= the honest proof's."""
        out: dict[tuple[int, int, int], bool] = {}
        for c in self.cells:
            ok = c.status == "ok" and c.passed and all(
                c.normalized[m] <= self.proof.normalized[m] for m in c.normalized)
            key = (c.grid, c.attack, c.steps)
            out[key] = out.get(key, True) and ok
        return out

    def to_dict(self) -> dict:
        p = self.proof
        return {
            "scenario": self.scenario,
            "proof": {"T": p.T, "d_ref": p.d_ref, "max_eps": p.max_eps, "delta": p.delta,
                      "normalized": p.normalized, "passed": p.passed,
                      "bundle_bytes": p.bundle_bytes, "accuracy": p.accuracy},
            "cells": [c.__dict__ for c in self.cells],
            "grid": [{"grid": g, "attack": a, "steps": s, "passed": v}
                     for (g, a, s), v in sorted(self.grid().items())],
            "ledgers": {k: v.to_dict() for k, v in self.ledgers.items()},
            "total_ledger": self.total_ledger.to_dict(),
        }


def accuracy_trend(bundle: ProofBundle, D: Dataset, points: int) -> list[tuple[float, float]]:
    """Accuracy of the stored checkpoint nearest each of ``points`` evenly spaced training fractions."""
    steps = sorted(bundle.checkpoints)
    if points < 2:
        raise ValueError("need at least two points")
    if len(steps) < points:
        raise ValueError(f"bundle stores {len(steps)} checkpoints, fewer than {points} points")
    arr = np.asarray(steps)
    out = []
    for i in range(points):
        frac = i / (points - 1)
        t = int(arr[np.argmin(np.abs(arr - frac * bundle.T))])
        acc, _ = evaluate(bundle.aux.model, bundle.checkpoints[t], D)
        out.append((frac, acc))
    return out


# -- running -----------------------------------------------------------------


def cell_seed(scenario_seed: int, attack: int, steps: int, repeat: int) -> int:
    ss = np.random.SeedSequence([scenario_seed, attack, steps, repeat])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def attack_config(sc: Scenario, steps: int, seed: int, k: int | None = None) -> atk.AttackConfig:
    adv = sc.adversary
    k = sc.k if k is None else k
    spe = adv.get("steps_per_epoch")
    if spe is None:
        spe = sc.S if steps % sc.S == 0 else steps
    return atk.AttackConfig(
        model=sc.model, eta=sc.eta, steps=steps, k=k, batch_size=sc.batch_size,
        n_max=int(adv.get("n_max", 10)), eta_adv=float(adv.get("eta_adv", 1.0)),
        lam=float(adv.get("lam", 0.01)), seed=seed, steps_per_epoch=int(spe),
        ordering=str(adv.get("ordering", "signed")),
        joint_lr_scale=float(adv.get("joint_lr_scale", 1.0)),
        backtrack=bool(adv.get("backtrack", True)),
        curate=bool(adv.get("curate", False)),
    )


def run_spoof(grid: AttackGrid, D: Dataset, W_T, zeta: InitSpec, cfg: atk.AttackConfig,
              delta_l2: float) -> atk.SpoofResult:
    delta = grid.delta if grid.delta is not None else delta_l2
    if grid.attack == 1:
        return atk.attack_one(D, W_T, delta, zeta, cfg)
    if grid.attack == 2:
        return atk.attack_two(D, W_T, delta, grid.gamma if grid.gamma is not None else cfg.gamma,
                              zeta, cfg)
    sigma = grid.sigma
    pre = None
    if sigma is None:
        sigma, est, pre = atk.default_sigma(D, W_T, cfg)
        alpha_beta = (est.alpha, est.beta)
    else:
        alpha_beta = None
    gamma = grid.gamma
    if grid.gamma_margin is not None:
        gamma = sigma + grid.gamma_margin
    res = atk.attack_three(D, W_T, delta, gamma, sigma, zeta, cfg, alpha_beta=alpha_beta)
    if pre is not None:
        res.pre_run_ledger = pre
    return res


class _CsvSink:
    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        self.lock = threading.Lock()
        if self.path is not None:
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.DictWriter(fh, CSV_COLUMNS).writeheader()

    def write(self, rows: list[dict]) -> None:
        if self.path is None or not rows:
            return
        with self.lock, open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.DictWriter(fh, CSV_COLUMNS).writerows(rows)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _row(**kw) -> dict:
    return {c: _fmt(kw.get(c)) for c in CSV_COLUMNS}


def _proof_rows(sc: Scenario, p: ProofSummary, led: CostLedger) -> list[dict]:
    rows = []
    for m in sc.metrics:
        thr = p.delta[m]
        rows.append(_row(
            scenario=sc.name, row_id=f"proof/{m}", proof_row=f"proof/{m}", row_type="proof",
            attack="none", steps=p.T, metric=m, repeats=1,
            normalized_error_proof=p.normalized[m], max_error=p.max_eps[m],
            threshold=thr if isinstance(thr, (int, float)) else max(thr),
            gradient_computations=led.gradient_computations, opt_iterations=led.opt_iterations,
            honest_steps=p.T, cost_ratio=led.gradient_computations / p.T,
            bundle_bytes=p.bundle_bytes, pass_rate=float(p.passed), passed=p.passed, status="ok"))
    return rows


def _spoof_rows(sc: Scenario, p: ProofSummary, cells: list[SpoofCell]) -> list[dict]:
    a, steps, gi = cells[0].attack, cells[0].steps, cells[0].grid
    ok = [c for c in cells if c.normalized]  # includes verified partial results
    statuses = sorted({c.status for c in cells})
    status = statuses[0] if len(statuses) == 1 else "mixed:" + "|".join(statuses)
    rows = []
    for m in sc.metrics:
        mean = (lambda f: float(np.mean([f(c) for c in ok])) if ok else None)
        thr = p.delta[m]
        grads = mean(lambda c: c.gradient_computations)
        rows.append(_row(
            scenario=sc.name, row_id=f"spoof/{gi}/{a}/{steps}/{m}", proof_row=f"proof/{m}",
            row_type="spoof", attack=a, steps=steps, gamma=cells[0].gamma, metric=m, repeats=len(ok),
            normalized_error_proof=p.normalized[m],
            normalized_error_spoof=mean(lambda c: c.normalized[m]),
            max_error=mean(lambda c: c.max_errors[m]),
            threshold=thr if isinstance(thr, (int, float)) else max(thr),
            gradient_computations=grads, opt_iterations=mean(lambda c: c.opt_iterations),
            honest_steps=p.T, cost_ratio=None if grads is None else grads / p.T,
            bundle_bytes=mean(lambda c: c.bundle_bytes),
            pass_rate=sum(c.passed for c in cells) / len(cells),
            passed=all(c.status == "ok" and c.passed and c.normalized[m] <= p.normalized[m]
                       for c in cells),
            status=status))
    return rows


def run_experiment(sc: Scenario, csv_path=None, *, base: Path | None = None,
                   keep: dict | None = None) -> ExperimentRecord:
    """Honest proof, d_ref, calibration, honest verification, then every attack cell.

    ``keep``, if given, receives the honest bundle, datasets and report under
    "bundle", "D_proof", "D_attack" and "report", plus every verified spoof
    under "spoofs" as {(grid, attack, steps, repeat): (SpoofResult, report)}.
    """
    sink = _CsvSink(csv_path)
    ledgers: dict[str, CostLedger] = {}
    D_proof, D_attack = proof_and_attack_data(sc, base)

    bundle, ledgers["proof"] = create_proof(D_proof, sc.k, sc.E, sc.S, sc.init, sc.eta, sc.noise,
                                            model=sc.model, batch_size=sc.batch_size,
                                            batch_seed=sc.seed)
    ledgers["dref"] = CostLedger()
    with ledgers["dref"].activate():
        d_ref = compute_d_ref(sc.model, sc.init, D_proof, sc.train_config, sc.dref_seeds,
                              sc.noise, sc.metrics)
    ledgers["calibration"] = CostLedger()
    with ledgers["calibration"].activate():
        errs = interval_errors(bundle, D_proof, sc.verifier_noise, sc.metrics)
    if sc.stages:
        max_eps: dict[str, Any] = stage_maxima(errs, bundle.T, sc.stages, sc.metrics)
    else:
        max_eps = {m: max(e[m] for e in errs.values()) for m in sc.metrics}
    delta = calibrate_delta(max_eps, d_ref)
    vcfg = sc.verification_config(delta)
    report = verify_proof(bundle, D_proof, vcfg, sc.verifier_noise)
    ledgers["verify_proof"] = report.ledger
    normalized = _normalized(report, d_ref)
    flat_eps = {m: (v if isinstance(v, (int, float)) else max(v)) for m, v in max_eps.items()}
    proof = ProofSummary(bundle.T, d_ref, flat_eps, delta, normalized, report.passed,
                         bundle_size(bundle), evaluate(sc.model, bundle.final, D_proof)[0])
    sink.write(_proof_rows(sc, proof, ledgers["proof"]))
    if keep is not None:
        keep.update(bundle=bundle, D_proof=D_proof, D_attack=D_attack, report=report, spoofs={})

    delta_l2 = delta["l2"] if isinstance(delta.get("l2"), (int, float)) else min(delta["l2"])
    jobs = [(gi, g, steps, r) for gi, g in enumerate(sc.attacks)
            for steps in g.steps for r in range(sc.repeats)]
    lock = threading.Lock()

    def run_cell(job):
        gi, g, steps, r = job
        seed = cell_seed(sc.seed, g.attack, steps, r)
        cell = SpoofCell(g.attack, steps, r, seed, gi)
        name = f"{gi}/{g.attack}/{steps}/{r}"
        try:
            cfg = attack_config(sc, steps, seed)
            try:
                res = run_spoof(g, D_attack, bundle.final, bundle.aux.init, cfg, delta_l2)
            except NonConvergence as exc:
                if exc.partial is None:
                    raise
                res = exc.partial
                cell.status, cell.detail = "NonConvergence", str(exc)
            rep = verify_proof(res.bundle, res.dataset, vcfg, sc.verifier_noise)
        except AttackError as exc:
            cell.status, cell.detail = type(exc).__name__, str(exc)
            return cell, {}
        cell.gamma = res.gamma
        cell.normalized = _normalized(rep, d_ref)
        cell.max_errors = rep.max_errors()
        cell.passed = rep.passed
        cell.gradient_computations = res.ledger.gradient_computations
        cell.opt_iterations = res.ledger.opt_iterations
        cell.bundle_bytes = bundle_size(res.bundle)
        led = {f"spoof:{name}": res.ledger, f"verify_spoof:{name}": rep.ledger}
        if res.pre_run_ledger is not None:
            led[f"prerun:{name}"] = res.pre_run_ledger
        if keep is not None:
            with lock:
                keep["spoofs"][(gi, g.attack, steps, r)] = (res, rep)
        return cell, led

    cells: list[SpoofCell] = []
    by_group: dict[tuple[int, int], list[SpoofCell]] = {}
    try:
        if sc.workers > 1:
            with ThreadPoolExecutor(sc.workers) as pool:
                results = pool.map(run_cell, jobs)
                for cell, led in results:
                    _collect(cell, led, cells, ledgers, by_group, lock, sc, proof, sink)
        else:
            for job in jobs:
                cell, led = run_cell(job)
                _collect(cell, led, cells, ledgers, by_group, lock, sc, proof, sink)
    finally:
        # flush incomplete groups so partial results survive an exception
        for key, group in by_group.items():
            if group and len(group) < sc.repeats:
                sink.write(_spoof_rows(sc, proof, group))
    rows = _proof_rows(sc, proof, ledgers["proof"])
    done: dict[tuple[int, int], list[SpoofCell]] = {}
    for c in sorted(cells, key=lambda c: (c.grid, c.steps, c.repeat)):
        done.setdefault((c.grid, c.steps), []).append(c)
    for group in done.values():
        rows.extend(_spoof_rows(sc, proof, group))
    return ExperimentRecord(sc.name, proof, cells, rows, ledgers)


def _collect(cell, led, cells, ledgers, by_group, lock, sc, proof, sink):
    with lock:
        cells.append(cell)
        ledgers.update(led)
        group = by_group.setdefault((cell.grid, cell.steps), [])
        group.append(cell)
        if len(group) == sc.repeats:
            sink.write(_spoof_rows(sc, proof, group))
            group.clear()


def _normalized(report: VerificationReport, d_ref: dict[str, float]) -> dict[str, float]:
    mx = report.max_errors()
    return {m: mx.get(m, 0.0) / d_ref[m] for m in d_ref}


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ScenarioError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return list(reader)


def summarize(rows: list[dict]) -> str:
    """Plain-text pass/fail grid: one line per (attack, T') with per-metric spoof/proof ratios."""
    lines = []
    proofs = [r for r in rows if r["row_type"] == "proof"]
    if proofs:
        p = proofs[0]
        lines.append(f"{p['scenario']}: honest T={p['steps']} "
                     f"verify={'pass' if p['passed'] == 'true' else 'FAIL'}")
    groups: dict[str, list[dict]] = {}
    for r in rows:
        if r["row_type"] == "spoof":
            groups.setdefault(r["row_id"].rsplit("/", 1)[0], []).append(r)
    for rs in groups.values():
        a, s = rs[0]["attack"], rs[0]["steps"]
        parts = []
        for r in rs:
            if r["normalized_error_spoof"]:
                ratio = float(r["normalized_error_spoof"]) / max(float(r["normalized_error_proof"]), 1e-300)
                parts.append(f"{r['metric']}={ratio:.2f}")
        verdict = "pass" if all(r["passed"] == "true" for r in rs) else "FAIL"
        cost = rs[0]["cost_ratio"] or "-"
        gamma = rs[0]["gamma"] or "-"
        lines.append(f"  attack {a} T'={s:>6} gamma={gamma:>9} {verdict:4} cost/T={cost:>8} "
                     f"status={rs[0]['status']} ratios " + " ".join(parts))
    return "\n".join(lines)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
