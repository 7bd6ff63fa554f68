import json

import numpy as np
import pytest

from polspoof import pol
from polspoof.data import sign_batch
from polspoof.diffcore import NoiseModel
from polspoof.errors import (
    BundleInvariantError,
    CheckpointFileError,
    ManifestError,
    MissingCheckpointError,
    ScheduleError,
)


def test_checkpoint_steps():
    assert pol.checkpoint_steps(12, 4) == [0, 4, 8, 12]
    assert pol.checkpoint_steps(10, 4) == [0, 4, 8, 10]
    assert pol.checkpoint_steps(3, 1) == [0, 1, 2, 3]


def test_create_proof_structure(tiny_proof, tiny_data):
    b, led = tiny_proof
    assert b.T == 36 and sorted(b.checkpoints) == list(range(0, 37, 4))
    assert len(b.batch_indices) == 36 and len(b.digests) == 36
    assert led.gradient_computations == 36 and led.opt_iterations == 0
    assert b.dataset_id == tiny_data.id
    for i in (0, 17, 35):
        assert b.digests[i] == sign_batch(tiny_data, b.batch_indices[i])
    assert b.intervals()[0] == (0, 4)


def test_create_proof_matches_train(tiny_proof, tiny_data, tiny_model, tiny_zeta):
    b, _ = tiny_proof
    W = pol.train(tiny_data, tiny_model, tiny_zeta, E=3, S=12, batch_size=16, eta=0.3, batch_seed=0)
    assert W == b.final


def test_create_proof_errors(tiny_data, tiny_model, tiny_zeta):
    with pytest.raises(ScheduleError):
        pol.create_proof(tiny_data, 5, 2, 12, tiny_zeta, 0.3, model=tiny_model, batch_size=16)
    with pytest.raises(ScheduleError):
        pol.create_proof(tiny_data, 0, 2, 12, tiny_zeta, 0.3, model=tiny_model, batch_size=16)


def test_noise_changes_trajectory(tiny_data, tiny_model, tiny_zeta, tiny_proof):
    b, _ = pol.create_proof(tiny_data, 4, 3, 12, tiny_zeta, 0.3, NoiseModel(1e-3, 1),
                            model=tiny_model, batch_size=16)
    assert b.final != tiny_proof[0].final
    assert b.aux.noise.amplitude == 1e-3


def test_validate_catches_broken_invariants(tiny_proof):
    b, _ = tiny_proof
    cps = dict(b.checkpoints)
    del cps[8]
    with pytest.raises(BundleInvariantError):
        pol.ProofBundle(cps, b.batch_indices, b.digests, b.aux, b.dataset_id).validate()
    with pytest.raises(BundleInvariantError):
        pol.ProofBundle(b.checkpoints, b.batch_indices[:-1], b.digests, b.aux, b.dataset_id).validate()
    with pytest.raises(BundleInvariantError):
        bad = list(b.digests)
        bad[0] = b"short"
        pol.ProofBundle(b.checkpoints, b.batch_indices, bad, b.aux, b.dataset_id).validate()


def test_save_load_bit_exact(tmp_path, tiny_proof):
    b, _ = tiny_proof
    n = pol.save_bundle(b, tmp_path / "b")
    assert n == pol.bundle_size(b)
    c = pol.load_bundle(tmp_path / "b")
    assert sorted(c.checkpoints) == sorted(b.checkpoints)
    for t in b.checkpoints:
        assert c.checkpoints[t].values.tobytes() == b.checkpoints[t].values.tobytes()
    assert all(np.array_equal(x, y) for x, y in zip(b.batch_indices, c.batch_indices))
    assert c.digests == b.digests and c.aux == b.aux and c.dataset_id == b.dataset_id
    assert pol.manifest_bytes(c) == pol.manifest_bytes(b)


def test_load_errors(tmp_path, tiny_proof):
    b, _ = tiny_proof
    root = tmp_path / "b"
    with pytest.raises(ManifestError):
        pol.load_bundle(root)
    pol.save_bundle(b, root)
    w = root / "weights" / "w_4.bin"
    w.write_bytes(w.read_bytes()[:-8])
    with pytest.raises(CheckpointFileError):
        pol.load_bundle(root)
    w.write_bytes(b"\x01")
    with pytest.raises(CheckpointFileError):
        pol.load_bundle(root)
    w.unlink()
    with pytest.raises(MissingCheckpointError):
        pol.load_bundle(root)
    pol.save_bundle(b, root)
    (root / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestError):
        pol.load_bundle(root)
    m = pol.manifest_dict(b)
    del m["aux"]
    (root / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ManifestError):
        pol.load_bundle(root)


def test_replace_checkpoint_copies(tiny_proof):
    b, _ = tiny_proof
    w = b.checkpoints[4].with_values(b.checkpoints[4].values + 1.0)
    c = pol.replace_checkpoint(b, 4, w)
    assert c.checkpoints[4] == w and b.checkpoints[4] != w


def test_bundle_size_grows_with_checkpoints(tiny_data, tiny_model, tiny_zeta, tiny_proof):
    b2, _ = pol.create_proof(tiny_data, 2, 3, 12, tiny_zeta, 0.3, model=tiny_model, batch_size=16)
    assert pol.bundle_size(b2) > pol.bundle_size(tiny_proof[0])
