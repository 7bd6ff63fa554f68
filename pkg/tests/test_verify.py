import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polspoof import verify as v
from polspoof.data import Dataset, make_blobs
from polspoof.diffcore import NoiseModel, WeightVector
from polspoof.errors import (
    CalibrationError,
    DatasetMismatchError,
    NotACheckpointError,
    VerificationConfigError,
)
from polspoof.models import InitSpec, init_weights
from polspoof.pol import ProofBundle, replace_checkpoint

vectors = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20)


def _cfg(b, delta=1e-9, **kw):
    kw.setdefault("Q", b.aux.S // b.k)
    return v.VerificationConfig({m: delta for m in v.METRICS}, **kw)


@settings(max_examples=100, deadline=None)
@given(vectors, st.data())
def test_distance_axioms(a, data):
    b = data.draw(st.lists(st.floats(-10, 10, allow_nan=False), min_size=len(a), max_size=len(a)))
    for m in ("l1", "l2", "linf"):
        assert v.distance(m, a, a) == 0.0
        assert v.distance(m, a, b) == pytest.approx(v.distance(m, b, a))
        assert v.distance(m, a, b) >= 0.0
    assert v.distance("linf", a, b) <= v.distance("l2", a, b) + 1e-12
    assert v.distance("l2", a, b) <= v.distance("l1", a, b) + 1e-12


def test_distance_values():
    a, b = [3.0, 0.0], [0.0, 4.0]
    assert v.distance("l1", a, b) == 7.0
    assert v.distance("l2", a, b) == 5.0
    assert v.distance("linf", a, b) == 4.0
    assert v.distance("cos", a, b) == pytest.approx(1.0)
    assert v.distance("cos", a, [6.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        v.distance("cos", a, [0.0, 0.0])
    with pytest.raises(ValueError):
        v.distance("l3", a, b)
    with pytest.raises(ValueError):
        v.distance("l2", a, [1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 5).map(float), max_size=12), st.integers(0, 14))
def test_top_q_against_sort(mag, Q):
    got = v.top_q(mag, Q)
    want = [i for i, _ in sorted(enumerate(mag), key=lambda p: p[1], reverse=True)][:Q]
    # stable sort by value descending keeps earlier indices first among ties
    assert got == want


def test_init_test_accepts_fresh_draw(tiny_model):
    z = InitSpec(seed=0)
    W = init_weights(tiny_model, z)
    r = v.verify_initialization(W, z.with_seed(99))
    assert r.passed and len(r.per_layer) == 4


def test_init_test_rejects_wrong_scale():
    from polspoof.models import ModelSpec
    m = ModelSpec((20, 30, 2))
    W = init_weights(m, InitSpec(seed=0, std=1.0))
    assert not v.verify_initialization(W, InitSpec()).passed


def test_init_test_needs_enough_parameters():
    W = WeightVector(np.zeros(5), (("b", (5,)),))
    with pytest.raises(ValueError):
        v.verify_initialization(W, InitSpec())


def test_noise_free_replay_is_exact(tiny_proof, tiny_data):
    b, _ = tiny_proof
    for t, end in b.intervals():
        assert v.replay(b, tiny_data, t) == b.checkpoints[end]
    with pytest.raises(NotACheckpointError):
        v.replay(b, tiny_data, 3)
    with pytest.raises(NotACheckpointError):
        v.replay(b, tiny_data, b.T)


def test_honest_proof_passes(tiny_proof, tiny_data):
    b, _ = tiny_proof
    r = v.verify_proof(b, tiny_data, _cfg(b))
    assert r.passed and r.verdict == "pass" and not r.failures
    assert set(r.max_errors().values()) == {0.0}
    assert r.ledger.gradient_computations == b.T
    assert sorted(r.selected) == [0, 1, 2]
    d = r.to_dict()
    assert d["verdict"] == "pass" and len(d["intervals"]) == 9


def test_top_q_selects_largest_moves(tiny_proof, tiny_data):
    b, _ = tiny_proof
    r = v.verify_proof(b, tiny_data, _cfg(b, Q=1))
    for e, ts in r.selected.items():
        assert len(ts) == 1
        mags = r.mags[e]
        assert ts[0] == e * b.aux.S + b.k * int(np.argmax(mags))
    assert r.ledger.gradient_computations == 3 * b.k


def test_tampered_checkpoint_fails(tiny_proof, tiny_data):
    b, _ = tiny_proof
    w = b.checkpoints[8]
    c = replace_checkpoint(b, 8, w.with_values(w.values + 1e-3))
    r = v.verify_proof(c, tiny_data, _cfg(c, delta=1e-6))
    assert not r.passed
    kinds = {(f.kind, f.t) for f in r.failures}
    assert (v.FailureKind.DISTANCE, 4) in kinds or (v.FailureKind.DISTANCE, 8) in kinds


def test_tampered_data_fails_signature(tiny_proof, tiny_data):
    b, _ = tiny_proof
    i = int(b.batch_indices[5][0])
    X = tiny_data.features.copy()
    X[i, 0] = np.nextafter(X[i, 0], np.inf)
    D2 = Dataset(X, tiny_data.labels, id=tiny_data.id)  # same claimed id, different bytes
    r = v.verify_proof(b, D2, _cfg(b, delta=1.0))
    assert any(f.kind is v.FailureKind.SIGNATURE and f.t == 4 for f in r.failures)


def test_bad_init_fails(tiny_proof, tiny_data, tiny_model):
    b, _ = tiny_proof
    w0 = b.checkpoints[0]
    c = replace_checkpoint(b, 0, w0.with_values(5.0 * w0.values))
    r = v.verify_proof(c, tiny_data, _cfg(c, delta=1e9, fail_fast=True))
    assert not r.passed and r.failures[0].kind is v.FailureKind.INIT
    assert not r.intervals  # fail fast stops before any replay


def test_dataset_mismatch(tiny_proof):
    b, _ = tiny_proof
    with pytest.raises(DatasetMismatchError):
        v.verify_proof(b, make_blobs(240, dim=3, seed=5), _cfg(b))


def test_config_errors(tiny_proof, tiny_data):
    b, _ = tiny_proof
    with pytest.raises(VerificationConfigError):
        v.verify_proof(b, tiny_data, _cfg(b, Q=4))
    with pytest.raises(VerificationConfigError):
        v.VerificationConfig({"l2": 1.0}, metrics=("l1",))
    with pytest.raises(VerificationConfigError):
        v.VerificationConfig({"l9": 1.0}, metrics=("l9",))
    with pytest.raises(VerificationConfigError):
        v.VerificationConfig({"l2": 1.0}, Q=0, metrics=("l2",))


def test_workers_match_serial(tiny_data, tiny_model, tiny_zeta):
    from polspoof.pol import create_proof
    b, _ = create_proof(tiny_data, 4, 3, 12, tiny_zeta, 0.3, NoiseModel(1e-3, 2),
                        model=tiny_model, batch_size=16)
    nm = NoiseModel(1e-3, 7)
    a = v.verify_proof(b, tiny_data, _cfg(b, delta=1.0), nm)
    c = v.verify_proof(b, tiny_data, _cfg(b, delta=1.0, workers=3), nm)
    assert a.max_errors() == c.max_errors()
    assert a.ledger.gradient_computations == c.ledger.gradient_computations
    assert a.max_errors()["l2"] > 0


def test_staged_thresholds():
    cfg = v.VerificationConfig({"l2": [3.0, 2.0, 1.0]}, metrics=("l2",))
    assert [cfg.threshold("l2", t, 90) for t in (0, 29, 30, 60, 89)] == [3.0, 3.0, 2.0, 1.0, 1.0]


def test_calibrate_constant():
    d = v.calibrate_delta({"l2": 0.01}, {"l2": 1.0})
    assert d["l2"] == pytest.approx(0.1)
    with pytest.raises(CalibrationError):
        v.calibrate_delta({"l2": 1.0}, {"l2": 1.0})


def test_calibrate_staged_is_non_increasing_and_covers():
    eps = [0.04, 0.01, 0.02, 0.001]
    d = v.calibrate_delta({"l2": eps}, {"l2": 1.0})["l2"]
    assert all(a >= b for a, b in zip(d, d[1:]))
    assert all(e < t < 1.0 for e, t in zip(eps, d))


def test_stage_maxima():
    errs = {0: {"l2": 1.0}, 10: {"l2": 3.0}, 50: {"l2": 2.0}, 90: {"l2": 0.5}}
    assert v.stage_maxima(errs, 100, 2, ("l2",)) == {"l2": [3.0, 2.0]}


def test_interval_errors_and_normalized(tiny_proof, tiny_data):
    b, _ = tiny_proof
    errs = v.interval_errors(b, tiny_data, NoiseModel(1e-3, 1))
    assert sorted(errs) == [t for t, _ in b.intervals()]
    assert all(e["l2"] > 0 for e in errs.values())
    n = v.normalized_errors(b, tiny_data, _cfg(b), {m: 2.0 for m in v.METRICS}, NoiseModel(1e-3, 1))
    assert n["l2"] == pytest.approx(max(e["l2"] for e in errs.values()) / 2.0)


def test_d_ref_is_large_relative_to_noise(tiny_data, tiny_model, tiny_zeta):
    tc = v.TrainConfig(E=3, S=12, batch_size=16, eta=0.3)
    d = v.compute_d_ref(tiny_model, tiny_zeta, tiny_data, tc)
    assert set(d) == set(v.METRICS) and d["l2"] > 0.1


def test_unsaved_bundle_rejected(tiny_proof, tiny_data):
    b, _ = tiny_proof
    broken = ProofBundle({0: b.checkpoints[0]}, b.batch_indices, b.digests, b.aux, b.dataset_id)
    with pytest.raises(Exception):
        v.verify_proof(broken, tiny_data, _cfg(b))
