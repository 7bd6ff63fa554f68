"""Command-line interface.

Exit codes: 0 pass, 2 verification or attack failure, 3 malformed bundle,
64 usage error. Seeds resolve as ``--seed`` > ``POL_SEED`` > config file.
"""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from polspoof import attacks as atk
from polspoof.data import load_dataset, save_pold
from polspoof.diffcore import NoiseModel
from polspoof.errors import (
    AttackError,
    BundleError,
    CalibrationError,
    DatasetError,
    DatasetMismatchError,
    NonConvergence,
    PolError,
)
from polspoof.experiment import (
    Scenario,
    ScenarioError,
    attack_config,
    build_dataset,
    dump_json,
    load_scenario,
    read_rows,
    run_experiment,
    summarize,
)
from polspoof.pol import create_proof, load_bundle, save_bundle
from polspoof.verify import (
    METRICS,
    VerificationConfig,
    calibrate_delta,
    compute_d_ref,
    interval_errors,
    stage_maxima,
    verify_proof,
)

EXIT_PASS, EXIT_FAIL, EXIT_MALFORMED, EXIT_USAGE = 0, 2, 3, 64


def resolve_seed(flag: int | None, fallback: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("POL_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise click.UsageError(f"POL_SEED must be an integer, got {env!r}") from None
    return fallback


def _common(config_required: bool = False):
    def deco(f):
        f = click.option("--metric", "metrics", multiple=True, type=click.Choice(METRICS),
                         help="Distance metric(s); repeatable. Default: all four.")(f)
        f = click.option("--noise", type=float, default=None,
                         help="Noise amplitude emulating hardware nondeterminism.")(f)
        f = click.option("--seed", type=int, default=None, help="Overrides POL_SEED and the config.")(f)
        f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                         required=config_required, help="Scenario file (YAML or JSON).")(f)
        return f
    return deco


def _scenario(path, seed, noise, metrics) -> tuple[Scenario, Path]:
    sc = load_scenario(path)
    sc = sc.with_overrides(seed=resolve_seed(seed, None), noise=noise, metrics=metrics)
    return sc, Path(path).resolve().parent


def _emit(obj) -> None:
    click.echo(json.dumps(obj, sort_keys=True, default=str))


def _dataset_for(bundle_dir, data):
    path = Path(data) if data else Path(bundle_dir) / "dataset.pold"
    if not path.exists():
        raise click.UsageError(f"dataset not found at {path}; pass --data")
    return load_dataset(path)


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise click.UsageError(f"cannot read {path}: {exc}") from None


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Create, verify and spoof proofs of learning."""


@cli.command()
@_common(config_required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Bundle directory.")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Dataset file (.csv or .pold) instead of the config's dataset.")
@click.option("--k", type=int, default=None, help="Checkpoint interval override.")
def prove(config_path, seed, noise, metrics, out, data, k):
    """Train honestly and write the proof bundle (plus dataset.pold) to OUT."""
    sc, base = _scenario(config_path, seed, noise, metrics)
    D = load_dataset(data) if data else build_dataset(sc.dataset, base)
    bundle, ledger = create_proof(D, k or sc.k, sc.E, sc.S, sc.init, sc.eta, sc.noise,
                                  model=sc.model, batch_size=sc.batch_size, batch_seed=sc.seed)
    nbytes = save_bundle(bundle, out)
    save_pold(D, Path(out) / "dataset.pold")
    dump_json(ledger.to_dict(), Path(out) / "ledger.json")
    _emit({"bundle": str(out), "T": bundle.T, "k": bundle.k, "bytes": nbytes,
           "dataset_id": D.id, "gradient_computations": ledger.gradient_computations})
    return EXIT_PASS


@cli.command()
@_common()
@click.argument("bundle_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Dataset file. Default: BUNDLE_DIR/dataset.pold.")
@click.option("--delta", "delta_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON from `calibrate` (key 'delta') or a bare metric->threshold map.")
@click.option("--threshold", "thresholds", multiple=True, metavar="METRIC=VALUE",
              help="Per-metric threshold; repeatable and overrides --delta.")
@click.option("--Q", "Q", type=int, default=None, help="Intervals replayed per epoch. Default: S/k.")
@click.option("--noise-seed", type=int, default=None)
@click.option("--alpha-sig", type=float, default=None)
@click.option("--workers", type=int, default=1)
@click.option("--fail-fast", is_flag=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Write the JSON report here.")
def verify(config_path, seed, noise, metrics, bundle_dir, data, delta_path, thresholds, Q,
           noise_seed, alpha_sig, workers, fail_fast, report_path):
    """Verify a proof bundle. Exit 0 on pass, 2 on fail, 3 if the bundle is malformed."""
    sc = load_scenario(config_path) if config_path else None
    bundle = load_bundle(bundle_dir)
    D = _dataset_for(bundle_dir, data)
    delta: dict = {}
    if delta_path:
        d = _load_json(delta_path)
        delta.update(d.get("delta", d))
    for item in thresholds:
        m, _, v = item.partition("=")
        try:
            delta[m] = float(v)
        except ValueError:
            raise click.UsageError(f"bad --threshold {item!r}; expected METRIC=VALUE") from None
    metrics = tuple(metrics) or (sc.metrics if sc else tuple(m for m in METRICS if m in delta))
    missing = [m for m in metrics if m not in delta]
    if not metrics or missing:
        raise click.UsageError(f"no threshold for metric(s) {missing or list(METRICS)}; "
                               "pass --delta or --threshold")
    if Q is None:
        Q = sc.Q if sc and sc.Q is not None else bundle.aux.S // bundle.k
    amp = noise if noise is not None else (sc.noise.amplitude if sc else bundle.aux.noise.amplitude)
    nseed = noise_seed if noise_seed is not None else resolve_seed(
        seed, sc.verifier_noise_seed if sc else 99)
    cfg = VerificationConfig({m: delta[m] for m in metrics}, Q=Q, metrics=metrics,
                             alpha_sig=alpha_sig if alpha_sig is not None else (sc.alpha_sig if sc else 0.01),
                             workers=workers, fail_fast=fail_fast)
    try:
        report = verify_proof(bundle, D, cfg, NoiseModel(amp, nseed))
    except DatasetMismatchError as exc:
        click.echo(f"FAIL: {exc}", err=True)
        return EXIT_FAIL
    if report_path:
        dump_json(report.to_dict(), report_path)
    _emit({"verdict": report.verdict, "max_errors": report.max_errors(),
           "failures": len(report.failures)})
    return EXIT_PASS if report.passed else EXIT_FAIL


@cli.command()
@_common()
@click.argument("bundle_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--dref", "dref_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="JSON from `dref` (key 'd_ref') or a bare metric->distance map.")
@click.option("--stages", type=int, default=None, help="Staged (non-increasing) thresholds.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the JSON here.")
def calibrate(config_path, seed, noise, metrics, bundle_dir, data, dref_path, stages, out):
    """Pick thresholds between the honest reproduction error and d_ref."""
    sc = load_scenario(config_path) if config_path else None
    bundle = load_bundle(bundle_dir)
    D = _dataset_for(bundle_dir, data)
    d = _load_json(dref_path)
    d_ref = d.get("d_ref", d)
    metrics = tuple(metrics) or (sc.metrics if sc else tuple(m for m in METRICS if m in d_ref))
    amp = noise if noise is not None else (sc.noise.amplitude if sc else bundle.aux.noise.amplitude)
    nseed = resolve_seed(seed, sc.verifier_noise_seed if sc else 99)
    stages = stages if stages is not None else (sc.stages if sc else None)
    errs = interval_errors(bundle, D, NoiseModel(amp, nseed), metrics)
    if stages:
        max_eps = stage_maxima(errs, bundle.T, stages, metrics)
    else:
        max_eps = {m: max(e[m] for e in errs.values()) for m in metrics}
    try:
        delta = calibrate_delta(max_eps, {m: d_ref[m] for m in metrics})
    except CalibrationError as exc:
        click.echo(f"FAIL: {exc}", err=True)
        return EXIT_FAIL
    result = {"delta": delta, "max_eps": max_eps, "d_ref": {m: d_ref[m] for m in metrics},
              "noise": {"amplitude": amp, "seed": nseed}}
    if out:
        dump_json(result, out)
    _emit(result)
    return EXIT_PASS


@cli.command()
@_common(config_required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the JSON here.")
def dref(config_path, seed, noise, metrics, data, out):
    """Distance between two independently trained models (the normalization scale)."""
    sc, base = _scenario(config_path, None, noise, metrics)
    seed = resolve_seed(seed, None)
    seeds = sc.dref_seeds if seed is None else (seed, seed + 1)
    D = load_dataset(data) if data else build_dataset(sc.dataset, base)
    d_ref = compute_d_ref(sc.model, sc.init, D, sc.train_config, seeds, sc.noise, sc.metrics)
    result = {"d_ref": d_ref, "seeds": list(seeds)}
    if out:
        dump_json(result, out)
    _emit(result)
    return EXIT_PASS


@cli.command()
@_common()
@click.option("--attack", type=click.Choice(["1", "2", "3"]), required=True)
@click.option("--target", "target_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Bundle whose final weights are spoofed.")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Attacker's dataset. Default: TARGET/dataset.pold.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--steps", type=int, required=True, help="Spoof length T'.")
@click.option("--k", type=int, default=None, help="Default: the target's k.")
@click.option("--delta", "delta_arg", default=None,
              help="l2 threshold, as a number or a `calibrate` JSON file. Default: unbounded.")
@click.option("--gamma", type=float, default=None)
@click.option("--gamma-margin", type=float, default=None, help="Attack III: gamma = sigma + margin.")
@click.option("--sigma", type=float, default=None)
@click.option("--n-max", type=int, default=None)
@click.option("--eta-adv", type=float, default=None)
@click.option("--steps-per-epoch", type=int, default=None)
@click.option("--strict", is_flag=True, help="Raise on any non-converged step.")
@click.option("--curate/--no-curate", default=None,
              help="Drop rows the target model misclassifies before scheduling.")
def spoof(config_path, seed, noise, metrics, attack, target_dir, data, out, steps, k, delta_arg,
          gamma, gamma_margin, sigma, n_max, eta_adv, steps_per_epoch, strict, curate):
    """Forge a proof for the target's final weights; writes a bundle, dataset.pold and ledger.json."""
    target = load_bundle(target_dir)
    D = _dataset_for(target_dir, data)
    aux = target.aux
    adv = dict(load_scenario(config_path).adversary) if config_path else {}
    for key, val in (("n_max", n_max), ("eta_adv", eta_adv), ("steps_per_epoch", steps_per_epoch),
                     ("curate", curate)):
        if val is not None:
            adv[key] = val
    sc = Scenario(name="spoof", seed=resolve_seed(seed, 0), dataset={}, model=aux.model,
                  init=aux.init, E=aux.E, S=aux.S, k=aux.k, batch_size=aux.batch_size,
                  eta=aux.eta, adversary=adv)
    try:
        cfg = attack_config(sc, steps, sc.seed, k=k)
    except (ValueError, PolError) as exc:
        raise click.UsageError(str(exc)) from None
    if strict or gamma is not None:
        cfg = replace(cfg, strict=strict, gamma=gamma if gamma is not None else cfg.gamma)
    delta = math.inf
    if delta_arg is not None:
        try:
            delta = float(delta_arg)
        except ValueError:
            d = _load_json(delta_arg)
            d = d.get("delta", d)
            delta = d["l2"] if not isinstance(d["l2"], list) else min(d["l2"])
    try:
        if attack == "1":
            res = atk.attack_one(D, target.final, delta, aux.init, cfg)
        elif attack == "2":
            res = atk.attack_two(D, target.final, delta, gamma, aux.init, cfg)
        else:
            ab = pre = None
            if sigma is None:
                sigma, est, pre = atk.default_sigma(D, target.final, cfg)
                ab = (est.alpha, est.beta)
            g = gamma if gamma is not None else cfg.gamma
            if gamma_margin is not None:
                g = sigma + gamma_margin
            res = atk.attack_three(D, target.final, delta, g, sigma, aux.init, cfg, alpha_beta=ab)
            if pre is not None:
                res.pre_run_ledger = pre
        status = EXIT_PASS
    except NonConvergence as exc:
        if exc.partial is None:
            click.echo(f"FAIL: {exc}", err=True)
            return EXIT_FAIL
        click.echo(f"FAIL (partial bundle written): {exc}", err=True)
        res, status = exc.partial, EXIT_FAIL
    except AttackError as exc:
        click.echo(f"FAIL: {type(exc).__name__}: {exc}", err=True)
        return EXIT_FAIL
    nbytes = save_bundle(res.bundle, out)
    save_pold(res.dataset, Path(out) / "dataset.pold")
    ledger = {
        "spoof": res.ledger.to_dict(),
        "pre_run": res.pre_run_ledger.to_dict() if res.pre_run_ledger else None,
        "honest_T": target.T,
        "iterations_total": int(sum(res.iterations)),
        "nonconverged": len(res.nonconverged),
        "gamma": res.gamma,
        "sigma": res.sigma,
    }
    dump_json(ledger, Path(out) / "ledger.json")
    _emit({"bundle": str(out), "attack": int(attack), "steps": steps, "bytes": nbytes,
           "gradient_computations": res.ledger.gradient_computations, "honest_T": target.T,
           "nonconverged": len(res.nonconverged)})
    return status


@cli.command()
@_common(config_required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True,
              help="Directory for results.csv and record.json.")
@click.option("--repeats", type=int, default=None)
@click.option("--workers", type=int, default=None)
def experiment(config_path, seed, noise, metrics, out, repeats, workers):
    """Honest proof, calibration and the full attack grid; writes CSV and JSON."""
    sc, base = _scenario(config_path, seed, noise, metrics)
    sc = sc.with_overrides(repeats=repeats, workers=workers)
    Path(out).mkdir(parents=True, exist_ok=True)
    rec = run_experiment(sc, Path(out) / "results.csv", base=base)
    dump_json(rec.to_dict(), Path(out) / "record.json")
    click.echo(summarize(rec.rows))
    return EXIT_PASS


@cli.command()
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Emit the rows as JSON instead of a table.")
def report(csv_path, as_json):
    """Summarize an experiment CSV as a pass/fail grid."""
    rows = read_rows(csv_path)
    click.echo(json.dumps(rows, indent=2) if as_json else summarize(rows))
    return EXIT_PASS


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="polspoof", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except DatasetMismatchError as exc:
        click.echo(f"FAIL: {exc}", err=True)
        return EXIT_FAIL
    except BundleError as exc:
        click.echo(f"malformed bundle: {exc}", err=True)
        return EXIT_MALFORMED
    except (ScenarioError, DatasetError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    return int(rv or 0)


if __name__ == "__main__":
    sys.exit(main())
