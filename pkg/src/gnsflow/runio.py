"""Run persistence: binary path files, versioned JSON reports, CSV tables, manifests.

Binary path layout: 8-byte magic, uint64 little-endian header length, UTF-8 JSON
header, then little-endian float64 positions in (record, particle, coordinate)
order.  The header carries the basis and drift documents so a file is
self-contained.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drift import SpectralField
from .flow import PathEnsemble
from .spectral import NoiseBasis

SCHEMA_VERSION = 1
PATH_MAGIC = b"GNSPATH1"
CSV_LIMIT = 200_000


class RunFormatError(ValueError):
    pass


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


# -- paths ----------------------------------------------------------------------------------------


def write_paths(path, ens: PathEnsemble) -> None:
    header = dict(ens.header(), basis=ens.basis.to_json(), drift=ens.drift.to_json(),
                  schema_version=SCHEMA_VERSION)
    blob = json.dumps(_jsonable(header), sort_keys=True).encode()
    data = np.ascontiguousarray(ens.positions, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(PATH_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(data.tobytes())


def _read_header(fh) -> dict:
    if fh.read(len(PATH_MAGIC)) != PATH_MAGIC:
        raise RunFormatError("not a path file (bad magic)")
    raw = fh.read(8)
    if len(raw) != 8:
        raise RunFormatError("truncated path header")
    (n,) = struct.unpack("<Q", raw)
    try:
        return json.loads(fh.read(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RunFormatError(f"corrupt path header: {exc}") from None


def read_path_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def read_paths(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        h = _read_header(fh)
        shape = (h["n_records"], h["N"], 2)
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != np.prod(shape):
        raise RunFormatError(f"expected {np.prod(shape)} values, found {data.size}")
    pos = data.reshape(shape).astype(float)
    return PathEnsemble(initial=pos[0].copy(), positions=pos, dt=h["dt"], thin=h["thin"], seed=h["seed"],
                        replica=h["replica"], noise_dt=h["noise_dt"], basis=NoiseBasis.from_json(h["basis"]),
                        drift=SpectralField.from_json(h["drift"]), scheme=h["scheme"])


def paths_to_csv(path, ensembles) -> None:
    rows = []
    for e in ensembles:
        for r, t in enumerate(e.times):
            for i, (a, b) in enumerate(e.positions[r]):
                rows.append((e.replica, r, repr(float(t)), i, repr(float(a)), repr(float(b))))
    write_csv(path, ["replica", "record", "time", "particle", "x1", "x2"], rows)


# -- reports ---------------------------------------------------------------------------------------


def write_json(path, doc: dict) -> None:
    out = {"schema_version": SCHEMA_VERSION, **_jsonable(doc)}
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    v = doc.get("schema_version")
    if v != SCHEMA_VERSION:
        raise RunFormatError(f"{path}: unsupported schema version {v!r}")
    return doc


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- manifests -------------------------------------------------------------------------------------


def versions() -> dict:
    from . import __version__

    return {"gnsflow": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "platform": sys.platform}


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    artifacts: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    versions: dict = field(default_factory=versions)
    exit_code: int = 0

    def to_json(self) -> dict:
        return {"command": self.command, "config": self.config, "seed": self.seed, "artifacts": self.artifacts,
                "wall_clock": self.wall_clock, "versions": self.versions, "exit_code": self.exit_code}

    @classmethod
    def from_json(cls, doc: dict) -> "RunManifest":
        try:
            return cls(doc["command"], doc["config"], int(doc["seed"]), dict(doc["artifacts"]),
                       float(doc["wall_clock"]), dict(doc["versions"]), int(doc.get("exit_code", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise RunFormatError(f"invalid manifest: {exc}") from None


class RunDirectory:
    """One writer per directory; every artifact is checksummed into the manifest."""

    MANIFEST = "manifest.json"

    def __init__(self, root, manifest: RunManifest):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def path(self, name: str) -> Path:
        return self.root / name

    def _register(self, name: str) -> Path:
        p = self.path(name)
        self.manifest.artifacts[name] = sha256(p)
        return p

    def json(self, name: str, doc: dict) -> Path:
        write_json(self.path(name), doc)
        return self._register(name)

    def csv(self, name: str, header, rows) -> Path:
        write_csv(self.path(name), header, rows)
        return self._register(name)

    def text(self, name: str, text: str) -> Path:
        self.path(name).write_text(text)
        return self._register(name)

    def paths(self, name: str, ens: PathEnsemble) -> Path:
        write_paths(self.path(name), ens)
        return self._register(name)

    def add(self, name: str) -> Path:
        return self._register(name)

    def close(self) -> Path:
        write_json(self.path(self.MANIFEST), self.manifest.to_json())
        return self.path(self.MANIFEST)


def load_manifest(run_dir) -> RunManifest:
    p = Path(run_dir) / RunDirectory.MANIFEST
    if not p.is_file():
        raise RunFormatError(f"{run_dir}: no manifest")
    return RunManifest.from_json(read_json(p))


def verify_checksums(run_dir) -> dict:
    """name -> True when the file on disk still matches the manifest checksum."""
    m = load_manifest(run_dir)
    return {name: os.path.isfile(Path(run_dir) / name) and sha256(Path(run_dir) / name) == digest
            for name, digest in m.artifacts.items()}
