"""Random phantoms, simulated measurements, noise and dataset storage.

A dataset directory holds ``manifest.json``, ``mesh.json`` and one pair of
raw little-endian float64 files per sample (``sigma_{i}.f64`` and
``v_{i}.f64``).  Measurements are stored noise-free; noise is drawn at load
time from per-sample seeds, so one dataset serves every noise level.
"""
from __future__ import annotations

import hashlib
import json
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import ForwardModel, MeasurementSet, StimProtocol, opposite_adjacent_protocol
from .mesh import ElectrodeConfig, Mesh

DATASET_FORMAT = "aahqsnet-dataset"
DATASET_VERSION = 1
MAX_REJECTIONS = 10_000

# Drive amplitude for simulated datasets.  Measurements and Jacobian scale
# linearly with it, which sets the data term against the coupling weight μ.
DEFAULT_CURRENT = 100.0

RADIUS_RANGE = (0.15, 0.25)
MAGNITUDE_RANGE = (0.2, 2.0)


class PhantomError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Anomaly:
    cx: float
    cy: float
    radius: float
    magnitude: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return (pts[:, 0] - self.cx) ** 2 + (pts[:, 1] - self.cy) ** 2 <= self.radius ** 2


@dataclass(frozen=True)
class Phantom:
    """Circular inclusions on a homogeneous background."""

    background: float = 1.0
    anomalies: tuple = ()

    def to_dict(self) -> dict:
        return {"background": self.background,
                "anomalies": [[a.cx, a.cy, a.radius, a.magnitude] for a in self.anomalies]}

    @classmethod
    def from_dict(cls, d: dict) -> "Phantom":
        return cls(float(d["background"]), tuple(Anomaly(*map(float, a)) for a in d["anomalies"]))


def generate_phantom(seed, background: float = 1.0) -> Phantom:
    """Draw 1-4 anomalies with uniform radius, magnitude and position.

    Centres are rejection-sampled from the square ``[-1, 1]²`` until the
    whole disk lies inside the unit disk.  Overlaps are allowed.
    """
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 5))
    anomalies = []
    rejections = 0
    for _ in range(count):
        r = float(rng.uniform(*RADIUS_RANGE))
        mag = float(rng.uniform(*MAGNITUDE_RANGE))
        while True:
            c = rng.uniform(-1.0, 1.0, size=2)
            if math.hypot(c[0], c[1]) + r <= 1.0:
                break
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                raise PhantomError(f"gave up placing anomaly of radius {r:.3f} after "
                                   f"{rejections} rejections (seed={seed!r})")
        anomalies.append(Anomaly(float(c[0]), float(c[1]), r, mag))
    return Phantom(background, tuple(anomalies))


def rasterize_phantom(mesh: Mesh, phantom: Phantom) -> np.ndarray:
    """Element conductivities: the last anomaly containing the centroid wins."""
    cent = mesh.centroids()
    sigma = np.full(mesh.n_T, float(phantom.background))
    for a in phantom.anomalies:
        sigma[a.contains(cent)] = a.magnitude
    return sigma


@dataclass(frozen=True)
class NoiseConfig:
    eta: float = 0.0
    seed: object = 0

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")


def noise_scale(v) -> float:
    """Reference level ``v̄`` for relative noise: the mean absolute entry."""
    return float(np.mean(np.abs(v)))


def snr_db(clean, noisy) -> float:
    """``20 log10(rms(clean) / rms(noisy − clean))``; ``inf`` for zero noise."""
    clean = np.asarray(clean, dtype=float)
    noisy = np.asarray(noisy, dtype=float)
    if clean.shape != noisy.shape:
        raise ValueError("clean and noisy vectors must have equal lengths")
    noise = np.sqrt(np.mean((noisy - clean) ** 2))
    if noise == 0:
        return math.inf
    return 20.0 * math.log10(np.sqrt(np.mean(clean ** 2)) / noise)


def add_noise(v: MeasurementSet, cfg: NoiseConfig) -> MeasurementSet:
    """Add ``η · v̄ · ξ`` with standard normal ``ξ``."""
    clean = v.v
    if cfg.eta == 0:
        return MeasurementSet(clean.copy(), v.protocol, {"eta": 0.0, "snr_db": math.inf})
    xi = np.random.default_rng(cfg.seed).standard_normal(clean.size)
    vbar = noise_scale(clean)
    noisy = clean + cfg.eta * vbar * xi
    return MeasurementSet(noisy, v.protocol,
                          {"eta": float(cfg.eta), "vbar": vbar, "snr_db": snr_db(clean, noisy)})


@dataclass
class Dataset:
    """Ground truths and clean measurements sharing one mesh and protocol."""

    mesh: Mesh
    electrodes: ElectrodeConfig
    protocol: StimProtocol
    sigmas: list = field(default_factory=list)
    v_clean: list = field(default_factory=list)
    phantoms: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    seed: int = 0
    eta: float = 0.0

    def __len__(self) -> int:
        return len(self.sigmas)

    def indices(self, split: str | None = None) -> list[int]:
        return [i for i, s in enumerate(self.splits) if split is None or s == split]

    def noisy(self, i: int, eta: float | None = None) -> MeasurementSet:
        """Measurements of sample ``i`` with noise drawn from ``(seed, i)``."""
        eta = self.eta if eta is None else eta
        ms = MeasurementSet(self.v_clean[i], self.protocol)
        return add_noise(ms, NoiseConfig(eta, [self.seed, i]))

    def arrays(self, split: str | None = None, eta: float | None = None):
        """``(V, S)`` arrays of noisy measurements and ground truths."""
        idx = self.indices(split)
        V = np.array([self.noisy(i, eta).v for i in idx]).reshape(len(idx), self.protocol.n_M)
        S = np.array([self.sigmas[i] for i in idx]).reshape(len(idx), self.mesh.n_T)
        return V, S

    def validate(self) -> None:
        n = len(self.sigmas)
        if not (len(self.v_clean) == len(self.phantoms) == len(self.splits) == n):
            raise DatasetError("per-sample lists have inconsistent lengths")
        for i, (s, v) in enumerate(zip(self.sigmas, self.v_clean)):
            if s.shape != (self.mesh.n_T,) or v.shape != (self.protocol.n_M,):
                raise DatasetError(f"sample {i} has inconsistent vector lengths")
            if not np.all(s > 0):
                raise DatasetError(f"sample {i} has a non-positive conductivity")


def _simulate(fm: ForwardModel, mesh: Mesh, seed: int, i: int):
    ph = generate_phantom([seed, i, 0])
    sigma = rasterize_phantom(mesh, ph)
    return ph, sigma, fm.forward(sigma)


def build_dataset(n_train: int, n_test: int, mesh: Mesh, electrodes: ElectrodeConfig | None = None,
                  protocol: StimProtocol | None = None, eta: float = 5e-3, seed: int = 0,
                  threads: int = 1) -> Dataset:
    """Simulate ``n_train + n_test`` samples; sample ``i`` depends only on ``(seed, i)``.

    The default protocol is opposite injection at ``DEFAULT_CURRENT``.
    """
    if n_train < 0 or n_test < 0:
        raise ValueError("sample counts must be >= 0")
    electrodes = electrodes or ElectrodeConfig(n_electrodes=mesh.n_E)
    protocol = protocol or opposite_adjacent_protocol(mesh.n_E, DEFAULT_CURRENT)
    fm = ForwardModel(mesh, electrodes, protocol)
    n = n_train + n_test
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(lambda i: _simulate(fm, mesh, seed, i), range(n)))
    else:
        out = [_simulate(fm, mesh, seed, i) for i in range(n)]
    ds = Dataset(mesh, electrodes, protocol, seed=int(seed), eta=float(eta))
    for i, (ph, sigma, v) in enumerate(out):
        ds.phantoms.append(ph)
        ds.sigmas.append(sigma)
        ds.v_clean.append(v)
        ds.splits.append("train" if i < n_train else "test")
    return ds


def _manifest(ds: Dataset) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": ds.seed,
        "eta": ds.eta,
        "electrodes": {"n_electrodes": ds.electrodes.n_electrodes,
                       "coverage_fraction": ds.electrodes.coverage_fraction,
                       "contact_impedance": ds.electrodes.z.tolist()},
        "protocol": ds.protocol.to_dict(),
        "mesh_file": "mesh.json",
        "n_T": ds.mesh.n_T,
        "n_M": ds.protocol.n_M,
        "samples": [{"index": i, "split": s, "phantom": p.to_dict(),
                     "sigma_file": f"sigma_{i}.f64", "v_file": f"v_{i}.f64"}
                    for i, (s, p) in enumerate(zip(ds.splits, ds.phantoms))],
    }


def save_dataset(ds: Dataset, path) -> Path:
    """Write the dataset directory, replacing ``path`` only once complete."""
    ds.validate()
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        _rmtree(tmp)
    tmp.mkdir(parents=True)
    ds.mesh.save(tmp / "mesh.json")
    for i, (s, v) in enumerate(zip(ds.sigmas, ds.v_clean)):
        s.astype("<f8").tofile(tmp / f"sigma_{i}.f64")
        v.astype("<f8").tofile(tmp / f"v_{i}.f64")
    (tmp / "manifest.json").write_text(json.dumps(_manifest(ds), indent=1))
    if path.exists():
        _rmtree(path)
    tmp.rename(path)
    return path


def _rmtree(p: Path) -> None:
    shutil.rmtree(p)


def _read_array(path: Path, n: int) -> np.ndarray:
    try:
        a = np.fromfile(path, dtype="<f8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if a.size != n:
        raise DatasetError(f"{path.name}: expected {n} values, found {a.size}")
    return a.astype(float)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        man = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset manifest in {path}: {exc}") from exc
    if man.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path} is not a dataset directory (format={man.get('format')!r})")
    if man.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {man.get('version')!r}")
    mesh = Mesh.load(path / man["mesh_file"])
    e = man["electrodes"]
    z = e["contact_impedance"]
    electrodes = ElectrodeConfig(e["n_electrodes"], e["coverage_fraction"],
                                 z[0] if len(set(z)) == 1 else tuple(z))
    ds = Dataset(mesh, electrodes, StimProtocol.from_dict(man["protocol"]),
                 seed=man["seed"], eta=man["eta"])
    for s in man["samples"]:
        ds.sigmas.append(_read_array(path / s["sigma_file"], man["n_T"]))
        ds.v_clean.append(_read_array(path / s["v_file"], man["n_M"]))
        ds.phantoms.append(Phantom.from_dict(s["phantom"]))
        ds.splits.append(s["split"])
    ds.validate()
    return ds


def dataset_hash(ds: Dataset) -> str:
    """SHA-256 over the manifest, the mesh and all stored vectors."""
    h = hashlib.sha256()
    h.update(json.dumps(_manifest(ds), sort_keys=True).encode())
    h.update(json.dumps(ds.mesh.to_dict(), sort_keys=True).encode())
    for s, v in zip(ds.sigmas, ds.v_clean):
        h.update(np.ascontiguousarray(s, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()
