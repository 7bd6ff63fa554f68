"""Honest proof creation and the proof bundle's data model and on-disk format.

Bundle directory::

    manifest.json        aux info, dataset id, checkpoint steps, batch indices, hex digests
    weights/w_{t}.bin    u64 LE element count, then float64 LE values

Steps with no stored checkpoint (the nil markers) are simply absent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from polspoof.data import Dataset, get_batches, sign_batch
from polspoof.diffcore import NoiseModel, WeightVector, inject_noise, loss_grad, sgd_update
from polspoof.errors import (
    BundleInvariantError,
    CheckpointFileError,
    ManifestError,
    MissingCheckpointError,
    ScheduleError,
)
from polspoof.ledger import CostLedger
from polspoof.models import InitSpec, ModelSpec, init_weights

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


@dataclass(frozen=True)
class AuxInfo:
    E: int
    S: int
    k: int
    batch_size: int
    eta: float
    model: ModelSpec
    init: InitSpec
    noise: NoiseModel = NoiseModel()
    format_version: int = FORMAT_VERSION

    @property
    def T(self) -> int:
        return self.E * self.S

    def to_dict(self) -> dict:
        return {
            "E": self.E, "S": self.S, "k": self.k, "batch_size": self.batch_size,
            "eta": self.eta, "model": self.model.to_dict(), "init": self.init.to_dict(),
            "noise": self.noise.to_dict(), "format_version": self.format_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> AuxInfo:
        return cls(int(d["E"]), int(d["S"]), int(d["k"]), int(d["batch_size"]),
                   float(d["eta"]), ModelSpec.from_dict(d["model"]),
                   InitSpec.from_dict(d["init"]), NoiseModel.from_dict(d["noise"]),
                   int(d.get("format_version", FORMAT_VERSION)))


def checkpoint_steps(T: int, k: int) -> list[int]:
    steps = list(range(0, T, k))
    if not steps or steps[-1] != T:
        steps.append(T)
    return steps


@dataclass(eq=False)
class ProofBundle:
    """The proof tuple: checkpoints, batch indices, batch digests, aux info.

    ``checkpoints`` maps step t to W_t for every stored step; all other steps
    are nil.
    """

    checkpoints: dict[int, WeightVector]
    batch_indices: list[np.ndarray]
    digests: list[bytes]
    aux: AuxInfo
    dataset_id: str

    @property
    def T(self) -> int:
        return self.aux.T

    @property
    def k(self) -> int:
        return self.aux.k

    @property
    def final(self) -> WeightVector:
        return self.checkpoints[self.T]

    def intervals(self) -> list[tuple[int, int]]:
        steps = sorted(self.checkpoints)
        return list(zip(steps[:-1], steps[1:]))

    def validate(self) -> None:
        aux = self.aux
        if aux.k < 1:
            raise BundleInvariantError("checkpoint interval k must be >= 1")
        if aux.S % aux.k:
            raise BundleInvariantError(f"k={aux.k} must divide S={aux.S}")
        if 0 not in self.checkpoints:
            raise BundleInvariantError("W_0 must be stored")
        expected = set(checkpoint_steps(aux.T, aux.k))
        got = set(self.checkpoints)
        if got != expected:
            missing = sorted(expected - got)[:5]
            extra = sorted(got - expected)[:5]
            raise BundleInvariantError(
                f"checkpoints must sit exactly at t = 0 mod k and t = T; "
                f"missing {missing}, unexpected {extra}"
            )
        if len(self.batch_indices) != aux.T or len(self.digests) != aux.T:
            raise BundleInvariantError(
                f"T={aux.T} but {len(self.batch_indices)} batch indices "
                f"and {len(self.digests)} digests"
            )
        n = aux.model.n_params
        for t, w in self.checkpoints.items():
            if len(w) != n:
                raise BundleInvariantError(f"checkpoint {t} has {len(w)} weights, model has {n}")
        for i, idx in enumerate(self.batch_indices):
            if len(idx) != aux.batch_size:
                raise BundleInvariantError(f"batch {i} has {len(idx)} rows, expected {aux.batch_size}")
        for i, h in enumerate(self.digests):
            if len(h) != 32:
                raise BundleInvariantError(f"digest {i} is {len(h)} bytes, expected 32")


# -- creation ----------------------------------------------------------------


def create_proof(
    D: Dataset,
    k: int,
    E: int,
    S: int,
    zeta: InitSpec,
    eta: float,
    nm: NoiseModel = NoiseModel(),
    *,
    model: ModelSpec,
    batch_size: int,
    batch_seed: int = 0,
) -> tuple[ProofBundle, CostLedger]:
    if k < 1:
        raise ScheduleError("k must be >= 1")
    if S % k:
        raise ScheduleError(f"k={k} must divide S={S} so checkpoints align with epochs")
    ledger = CostLedger()
    W = init_weights(model, zeta)
    checkpoints: dict[int, WeightVector] = {}
    indices: list[np.ndarray] = []
    digests: list[bytes] = []
    with ledger.activate():
        for e in range(E):
            schedule = get_batches(D, S, batch_size, seed=[batch_seed, e])
            for s, idx in enumerate(schedule):
                t = e * S + s
                if t % k == 0:
                    checkpoints[t] = W
                X, y = D.batch(idx)
                _, g = loss_grad(model, W, X, y)
                W = sgd_update(W, inject_noise(g, nm, t), eta)
                indices.append(idx)
                digests.append(sign_batch(D, idx))
    checkpoints[E * S] = W
    aux = AuxInfo(E, S, k, batch_size, float(eta), model, zeta, nm)
    bundle = ProofBundle(checkpoints, indices, digests, aux, D.id)
    bundle.validate()
    return bundle, ledger


def train(D: Dataset, model: ModelSpec, zeta: InitSpec, *, E: int, S: int, batch_size: int,
          eta: float, batch_seed: int, nm: NoiseModel = NoiseModel(),
          ledger: CostLedger | None = None) -> WeightVector:
    """Plain SGD with the same schedule as :func:`create_proof`, keeping only W_T."""
    W = init_weights(model, zeta)
    for e in range(E):
        for s, idx in enumerate(get_batches(D, S, batch_size, seed=[batch_seed, e])):
            X, y = D.batch(idx)
            _, g = loss_grad(model, W, X, y, ledger=ledger)
            W = sgd_update(W, inject_noise(g, nm, e * S + s), eta)
    return W


# -- persistence -------------------------------------------------------------


def _weight_bytes(w: WeightVector) -> bytes:
    return _LEN.pack(len(w)) + np.ascontiguousarray(w.values, dtype="<f8").tobytes()


def manifest_dict(b: ProofBundle) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "dataset_id": b.dataset_id,
        "aux": b.aux.to_dict(),
        "checkpoints": sorted(b.checkpoints),
        "batch_indices": [np.asarray(i).tolist() for i in b.batch_indices],
        "digests": [h.hex() for h in b.digests],
    }


def manifest_bytes(b: ProofBundle) -> bytes:
    return json.dumps(manifest_dict(b), separators=(",", ":")).encode()


def _serialize(b: ProofBundle) -> dict[str, bytes]:
    files = {"manifest.json": manifest_bytes(b)}
    for t, w in sorted(b.checkpoints.items()):
        files[f"weights/w_{t}.bin"] = _weight_bytes(w)
    return files


def bundle_size(b: ProofBundle) -> int:
    """Total serialized bytes: manifest (indices, digests, aux) plus weight files."""
    return sum(len(v) for v in _serialize(b).values())


def save_bundle(b: ProofBundle, directory) -> int:
    b.validate()
    root = Path(directory)
    (root / "weights").mkdir(parents=True, exist_ok=True)
    written = 0
    for rel, payload in _serialize(b).items():
        (root / rel).write_bytes(payload)
        written += len(payload)
    return written


def _read_weights(path: Path, shapes) -> WeightVector:
    if not path.exists():
        raise MissingCheckpointError(f"missing checkpoint file {path}")
    raw = path.read_bytes()
    if len(raw) < _LEN.size:
        raise CheckpointFileError(f"{path}: truncated length header")
    (n,) = _LEN.unpack_from(raw)
    if len(raw) != _LEN.size + 8 * n:
        raise CheckpointFileError(f"{path}: header says {n} values, file holds "
                                  f"{(len(raw) - _LEN.size) / 8:g}")
    values = np.frombuffer(raw, dtype="<f8", offset=_LEN.size, count=n)
    try:
        return WeightVector(values, shapes)
    except ValueError as exc:
        raise CheckpointFileError(f"{path}: {exc}") from None


def load_bundle(directory) -> ProofBundle:
    root = Path(directory)
    try:
        m = json.loads((root / "manifest.json").read_text())
        aux = AuxInfo.from_dict(m["aux"])
        steps = [int(t) for t in m["checkpoints"]]
        indices = [np.asarray(i, dtype=np.int64) for i in m["batch_indices"]]
        digests = [bytes.fromhex(h) for h in m["digests"]]
        dataset_id = str(m["dataset_id"])
    except FileNotFoundError:
        raise ManifestError(f"no manifest.json in {root}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"corrupt manifest in {root}: {exc}") from None
    shapes = aux.model.shapes
    checkpoints = {t: _read_weights(root / "weights" / f"w_{t}.bin", shapes) for t in steps}
    b = ProofBundle(checkpoints, indices, digests, aux, dataset_id)
    b.validate()
    return b


def replace_checkpoint(b: ProofBundle, t: int, w: WeightVector) -> ProofBundle:
    cps = dict(b.checkpoints)
    cps[t] = w
    return ProofBundle(cps, list(b.batch_indices), list(b.digests), b.aux, b.dataset_id)


def stored_steps(b: ProofBundle) -> Iterable[int]:
    return sorted(b.checkpoints)
