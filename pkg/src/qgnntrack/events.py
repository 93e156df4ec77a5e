"""Collision events: TrackML CSV ingestion, pileup subsampling and a helical-track generator.

Units are mm, GeV and Tesla everywhere. Conversion from the Cartesian TrackML
layout to cylindrical coordinates happens once, at ingestion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd

HIT_COLUMNS = ("hit_id", "x", "y", "z", "volume_id", "layer_id", "module_id")
TRUTH_COLUMNS = ("hit_id", "particle_id")
PARTICLE_COLUMNS = ("particle_id", "vx", "vy", "vz", "px", "py", "pz", "q")

# Barrel (volume_id, layer_id) pairs of the public TrackML detector, innermost first.
TRACKML_BARREL_LAYERS = (
    (8, 2), (8, 4), (8, 6), (8, 8),
    (13, 2), (13, 4), (13, 6), (13, 8),
    (17, 2), (17, 4),
)

# GeV / (T * m) for a unit charge.
_CURVATURE_CONST = 0.3


class IngestionError(Exception):
    """Raised when an event file is missing or does not follow the TrackML schema."""


class Hit(NamedTuple):
    hit_id: int
    r: float
    phi: float
    z: float
    volume_id: int
    layer_id: int
    particle_id: int
    layer_index: int = -1


class Particle(NamedTuple):
    particle_id: int
    vertex: tuple[float, float, float]
    momentum: tuple[float, float, float]
    charge: int

    @property
    def pt(self) -> float:
        return math.hypot(self.momentum[0], self.momentum[1])


@dataclass(frozen=True)
class Event:
    event_id: int
    hits: tuple[Hit, ...]
    particles: tuple[Particle, ...]
    pileup_mu: int

    def particle_map(self) -> dict[int, Particle]:
        return {p.particle_id: p for p in self.particles}

    def vertices(self) -> list[tuple[float, float, float]]:
        """Distinct primary vertices, sorted so that indices are reproducible."""
        return sorted({p.vertex for p in self.particles})


def to_cylindrical(x, y, z):
    """Cartesian -> (r, phi, z) with phi in (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.hypot(x, y)
    phi = np.arctan2(y, x)
    # arctan2 returns -pi for (x<0, y=-0.0); fold onto +pi
    phi = np.where(phi <= -np.pi, np.pi, phi)
    return r, phi, np.asarray(z, dtype=float)


def to_cartesian(r, phi, z):
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return r * np.cos(phi), r * np.sin(phi), np.asarray(z, dtype=float)


def wrap_phi(dphi):
    """Wrap an angle difference into (-pi, pi]."""
    out = np.mod(np.asarray(dphi, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(out <= -np.pi, out + 2 * np.pi, out)


def _read_csv(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing event file: {path}")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise IngestionError(f"{path}: cannot parse CSV ({exc})") from exc
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise IngestionError(f"{path}: missing columns {missing}")
    frame = frame[list(columns)]
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1).to_numpy()
    if bad.any():
        # +2: one-based numbering and the header line
        row = int(np.flatnonzero(bad)[0]) + 2
        raise IngestionError(f"{path}: malformed row {row}")
    return numeric


def load_trackml_event(hits_path, truth_path, particles_path, event_id: int = 0) -> Event:
    """Read one TrackML hits/truth/particles triplet.

    Hits absent from the truth file are treated as noise (particle_id 0).
    """
    hits = _read_csv(hits_path, HIT_COLUMNS)
    truth = _read_csv(truth_path, TRUTH_COLUMNS)
    parts = _read_csv(particles_path, PARTICLE_COLUMNS)

    hit_ids = hits["hit_id"].to_numpy(dtype=np.int64)
    truth_ids = truth["hit_id"].to_numpy(dtype=np.int64)
    unknown = np.setdiff1d(truth_ids, hit_ids)
    if unknown.size:
        raise IngestionError(
            f"{truth_path}: {unknown.size} truth hit_id(s) absent from {hits_path}, e.g. {int(unknown[0])}"
        )
    pid_of = dict(zip(truth_ids.tolist(), truth["particle_id"].to_numpy(dtype=np.int64).tolist()))

    r, phi, z = to_cylindrical(hits["x"].to_numpy(), hits["y"].to_numpy(), hits["z"].to_numpy())
    vol = hits["volume_id"].to_numpy(dtype=np.int64)
    lay = hits["layer_id"].to_numpy(dtype=np.int64)
    hit_list = tuple(
        Hit(int(h), float(r[i]), float(phi[i]), float(z[i]), int(vol[i]), int(lay[i]), int(pid_of.get(int(h), 0)))
        for i, h in enumerate(hit_ids)
    )

    particles = tuple(
        Particle(int(row.particle_id), (float(row.vx), float(row.vy), float(row.vz)),
                 (float(row.px), float(row.py), float(row.pz)), int(row.q))
        for row in parts.itertuples(index=False)
    )
    n_vertices = len({p.vertex for p in particles})
    return Event(event_id, hit_list, particles, n_vertices)


def event_paths(directory, event_id: int) -> tuple[Path, Path, Path]:
    """TrackML file naming: event000001000-hits.csv and friends."""
    stem = Path(directory) / f"event{event_id:09d}"
    return (Path(f"{stem}-hits.csv"), Path(f"{stem}-truth.csv"), Path(f"{stem}-particles.csv"))


def list_event_ids(directory) -> list[int]:
    ids = []
    for path in sorted(Path(directory).glob("event*-hits.csv")):
        digits = path.name[len("event"):-len("-hits.csv")]
        if digits.isdigit():
            ids.append(int(digits))
    return ids


def _fmt(value: float) -> str:
    return repr(float(value))


def write_event(event: Event, directory) -> tuple[Path, Path, Path]:
    """Write an event as a TrackML-style CSV triplet (floats in round-trip repr)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hits_path, truth_path, particles_path = event_paths(directory, event.event_id)

    x, y, z = to_cartesian([h.r for h in event.hits], [h.phi for h in event.hits], [h.z for h in event.hits])
    lines = [",".join(HIT_COLUMNS)]
    for i, h in enumerate(event.hits):
        lines.append(f"{h.hit_id},{_fmt(x[i])},{_fmt(y[i])},{_fmt(z[i])},{h.volume_id},{h.layer_id},0")
    hits_path.write_text("\n".join(lines) + "\n")

    lines = [",".join(TRUTH_COLUMNS)]
    lines += [f"{h.hit_id},{h.particle_id}" for h in event.hits if h.particle_id != 0]
    truth_path.write_text("\n".join(lines) + "\n")

    lines = [",".join(PARTICLE_COLUMNS)]
    for p in event.particles:
        vals = [*p.vertex, *p.momentum]
        lines.append(f"{p.particle_id}," + ",".join(_fmt(v) for v in vals) + f",{p.charge}")
    particles_path.write_text("\n".join(lines) + "\n")
    return hits_path, truth_path, particles_path


def read_event(directory, event_id: int) -> Event:
    return load_trackml_event(*event_paths(directory, event_id), event_id=event_id)


def select_vertices(event: Event, vertex_indices: Sequence[int]) -> Event:
    """Keep the particles (and their hits) of the given vertices; noise hits are dropped."""
    vertices = event.vertices()
    keep = {vertices[i] for i in vertex_indices}
    particles = tuple(p for p in event.particles if p.vertex in keep)
    pids = {p.particle_id for p in particles}
    hits = tuple(h for h in event.hits if h.particle_id in pids)
    return Event(event.event_id, hits, particles, len(keep))


def subsample_pileup(event: Event, mu: int, rng: np.random.Generator) -> Event:
    """Randomly retain ``mu`` primary vertices.

    The vertices are a prefix of one random permutation, so the same generator
    state yields nested selections for increasing ``mu``.
    """
    n = len(event.vertices())
    if mu < 0 or mu > n:
        raise ValueError(f"mu={mu} outside [0, {n}] available vertices")
    order = rng.permutation(n)
    return select_vertices(event, sorted(order[:mu].tolist()))


@dataclass(frozen=True)
class SynthConfig:
    """Toy barrel detector in a uniform solenoidal field.

    Tracks are generated in a ``phi_range`` sector so that a few tens of vertices
    already give a realistic mix of true and fake doublets.
    """

    layer_radii: tuple[float, ...] = (32.0, 72.0, 116.0, 172.0, 260.0, 360.0, 500.0, 660.0, 820.0, 1020.0)
    magnetic_field: float = 2.0
    tracks_per_vertex: tuple[int, int] = (1, 3)
    vertex_z_spread: float = 55.0
    vertex_xy_spread: float = 0.015
    pt_range: tuple[float, float] = (1.0, 10.0)
    eta_range: tuple[float, float] = (-1.0, 1.0)
    phi_range: tuple[float, float] = (-0.4, 0.4)
    barrel_half_length: float = 1100.0
    noise_hit_fraction: float = 0.0
    seed: int = 0
    barrel_layers: tuple[tuple[int, int], ...] = field(default=TRACKML_BARREL_LAYERS)

    def __post_init__(self):
        radii = np.asarray(self.layer_radii, dtype=float)
        if radii.ndim != 1 or radii.size == 0 or np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
            raise ValueError("layer_radii must be positive and strictly increasing")
        if len(self.barrel_layers) != radii.size:
            raise ValueError("need one (volume_id, layer_id) pair per layer radius")
        lo, hi = self.tracks_per_vertex
        if lo < 0 or hi < lo:
            raise ValueError("tracks_per_vertex must satisfy 0 <= low <= high")
        if not 0 < self.pt_range[0] <= self.pt_range[1]:
            raise ValueError("pt_range must be positive and ordered")
        if self.eta_range[0] > self.eta_range[1] or self.phi_range[0] > self.phi_range[1]:
            raise ValueError("eta_range and phi_range must be ordered")
        if not 0 <= self.noise_hit_fraction < 1:
            raise ValueError("noise_hit_fraction must lie in [0, 1)")
        if self.magnetic_field < 0 or self.vertex_z_spread < 0 or self.vertex_xy_spread < 0:
            raise ValueError("field and vertex spreads must be non-negative")


def helix_radius(pt: float, field_tesla: float, charge: int = 1) -> float:
    """Transverse radius of curvature in mm (inf for a neutral track or zero field)."""
    if field_tesla == 0 or charge == 0:
        return math.inf
    return 1000.0 * pt / (_CURVATURE_CONST * field_tesla * abs(charge))


@dataclass(frozen=True)
class Helix:
    """Charged-particle trajectory parametrized by the turning angle ``alpha`` >= 0.

    For B = 0 the parameter is the transverse path length instead.
    """

    vertex: tuple[float, float, float]
    phi0: float
    pt: float
    pz: float
    charge: int
    field: float

    @classmethod
    def from_particle(cls, particle: Particle, field_tesla: float) -> "Helix":
        px, py, pz = particle.momentum
        return cls(particle.vertex, math.atan2(py, px), math.hypot(px, py), pz, particle.charge, field_tesla)

    @property
    def radius(self) -> float:
        return helix_radius(self.pt, self.field, self.charge)

    @property
    def straight(self) -> bool:
        return math.isinf(self.radius)

    @property
    def center(self) -> tuple[float, float]:
        # positive charges bend clockwise for B along +z
        s = 1.0 if self.charge > 0 else -1.0
        rho = self.radius
        return (self.vertex[0] + s * rho * math.sin(self.phi0), self.vertex[1] - s * rho * math.cos(self.phi0))

    def point(self, alpha: float) -> tuple[float, float, float]:
        vx, vy, vz = self.vertex
        cot = self.pz / self.pt
        if self.straight:
            return (vx + alpha * math.cos(self.phi0), vy + alpha * math.sin(self.phi0), vz + alpha * cot)
        s = 1.0 if self.charge > 0 else -1.0
        rho = self.radius
        cx, cy = self.center
        ang = self.phi0 + s * math.pi / 2 - s * alpha
        return (cx + rho * math.cos(ang), cy + rho * math.sin(ang), vz + rho * alpha * cot)

    def crossing(self, radius: float) -> float | None:
        """Smallest alpha > 0 where the transverse trajectory reaches ``radius``."""
        vx, vy, _ = self.vertex
        if self.straight:
            ux, uy = math.cos(self.phi0), math.sin(self.phi0)
            b = vx * ux + vy * uy
            c = vx * vx + vy * vy - radius * radius
            disc = b * b - c
            if disc < 0:
                return None
            t = -b + math.sqrt(disc)
            return t if t > 0 else None
        rho = self.radius
        cx, cy = self.center
        d = math.hypot(cx, cy)
        if d == 0 or radius > rho + d or radius < abs(rho - d):
            return None
        # angle at the circle centre between the direction to the origin and the crossing points
        cos_beta = (rho * rho + d * d - radius * radius) / (2 * rho * d)
        beta = math.acos(max(-1.0, min(1.0, cos_beta)))
        to_origin = math.atan2(-cy, -cx)
        s = 1.0 if self.charge > 0 else -1.0
        start = self.phi0 + s * math.pi / 2
        best = None
        for ang in (to_origin + beta, to_origin - beta):
            alpha = (s * (start - ang)) % (2 * math.pi)
            if alpha > 0 and (best is None or alpha < best):
                best = alpha
        return best


def synth_event(config: SynthConfig, mu: int, rng: np.random.Generator | None = None, event_id: int = 0) -> Event:
    """Generate one event with ``mu`` vertices of helical tracks crossing the barrel cylinders.

    Without an explicit generator, one seeded from ``(config.seed, event_id)`` is used.
    """
    if rng is None:
        rng = np.random.default_rng([config.seed, event_id])
    radii = config.layer_radii
    hits: list[Hit] = []
    particles: list[Particle] = []
    hit_id = 1
    pid = 1
    lo_pt, hi_pt = config.pt_range
    for _ in range(mu):
        vertex = (float(rng.normal(0, config.vertex_xy_spread)), float(rng.normal(0, config.vertex_xy_spread)),
                  float(rng.normal(0, config.vertex_z_spread)))
        n_tracks = int(rng.integers(config.tracks_per_vertex[0], config.tracks_per_vertex[1] + 1))
        for _ in range(n_tracks):
            pt = float(np.exp(rng.uniform(math.log(lo_pt), math.log(hi_pt))))
            eta = float(rng.uniform(*config.eta_range))
            phi0 = float(rng.uniform(*config.phi_range))
            charge = 1 if rng.random() < 0.5 else -1
            momentum = (pt * math.cos(phi0), pt * math.sin(phi0), pt * math.sinh(eta))
            particle = Particle(pid, vertex, momentum, charge)
            helix = Helix.from_particle(particle, config.magnetic_field)
            for layer, radius in enumerate(radii):
                alpha = helix.crossing(radius)
                if alpha is None:
                    break
                x, y, z = helix.point(alpha)
                if abs(z) > config.barrel_half_length:
                    break
                r, phi, _ = to_cylindrical(x, y, z)
                vol, lay = config.barrel_layers[layer]
                hits.append(Hit(hit_id, float(r), float(phi), float(z), vol, lay, pid))
                hit_id += 1
            particles.append(particle)
            pid += 1

    n_signal = len(hits)
    f = config.noise_hit_fraction
    n_noise = int(round(n_signal * f / (1 - f))) if n_signal else 0
    for _ in range(n_noise):
        layer = int(rng.integers(len(radii)))
        phi = float(rng.uniform(*config.phi_range))
        z = float(rng.uniform(-config.barrel_half_length, config.barrel_half_length))
        x, y, _ = to_cartesian(radii[layer], phi, z)
        r, phi, _ = to_cylindrical(x, y, z)
        vol, lay = config.barrel_layers[layer]
        hits.append(Hit(hit_id, float(r), float(phi), z, vol, lay, 0))
        hit_id += 1

    return Event(event_id, tuple(hits), tuple(particles), len({p.vertex for p in particles}) if particles else 0)


__all__ = [
    "Event", "Helix", "Hit", "IngestionError", "Particle", "SynthConfig", "TRACKML_BARREL_LAYERS",
    "event_paths", "helix_radius", "list_event_ids", "load_trackml_event", "read_event", "select_vertices",
    "subsample_pileup", "synth_event", "to_cartesian", "to_cylindrical", "wrap_phi", "write_event",
]
