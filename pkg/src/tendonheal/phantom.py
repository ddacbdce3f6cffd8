"""Synthetic tendon ultrasound phantoms driven by the six healing scores.

Each slice is an analytic template (tissue layers, tendon, fluid) sampled on
the pixel grid, followed by optional artifacts and multiplicative speckle::

    pixels = clamp01(artifacts(template(state, plane, geometry)) * m),
    m ~ LogNormal(0, speckle_sigma)  (unit median)

How each score drives the template (knob -> summary statistic that rises or
falls with it, see :func:`summary_statistics`):

    TT   tendon half-thickness (sagittal) / ellipse width (axial)   -> band_width (up)
    STE  width of the logistic tendon edge                          -> edge_sharpness (down)
    TE   radius of a hypoechoic core inside the tendon              -> hypoechoic_area (up)
    TisE thickness of the hypoechoic fluid rim outside the tendon   -> hypoechoic_area (up)
    TU   phase and amplitude disruption of the fibre pattern        -> fibre_continuity (down)
    SCT  amplitude of coarse intratendinous heterogeneity           -> intratendinous_variance (up)

Sagittal slices show horizontal hyperechoic fibre bands; axial slices show a
punctate fibre pattern inside an elliptic cross-section. Per-slice geometry
(tendon position, pattern phases) and artifact placement come from the slice
seed, never from the state, so two states rendered with one seed differ only
through the knobs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter, uniform_filter1d
from scipy.special import expit

from .models import PLANES, TARGETS
from .seeding import derive_seed, make_rng

# Weeks after surgery for the ten exam timepoints: preoperative, 1 week,
# 3/6/9/12 weeks, 4.5/6/9/12 months.
TIMEPOINT_WEEKS = (0.0, 1.0, 3.0, 6.0, 9.0, 12.0, 19.5, 26.0, 39.0, 52.0)
TIMEPOINT_LABELS = (
    "preoperative",
    "1 week",
    "3 weeks",
    "6 weeks",
    "9 weeks",
    "12 weeks",
    "4.5 months",
    "6 months",
    "9 months",
    "12 months",
)
HEALTHY_TIMEPOINT = -1
PROFILES = {"fast": 6.0, "typical": 12.0, "slow": 24.0}  # recovery time constant, weeks
MAX_JITTER = 0.4


@dataclass(frozen=True)
class HealingState:
    sct: float
    tt: float
    ste: float
    te: float
    tu: float
    tise: float

    def __post_init__(self):
        for name in ("sct", "tt", "ste", "te", "tu", "tise"):
            value = float(getattr(self, name))
            if not (1.0 <= value <= 7.0):
                raise ValueError(f"healing score {name.upper()}={value} outside [1, 7]")
            object.__setattr__(self, name, value)

    @classmethod
    def healthy(cls) -> "HealingState":
        return cls(1, 1, 1, 1, 1, 1)

    @classmethod
    def uniform(cls, value: float) -> "HealingState":
        return cls(*([value] * 6))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "HealingState":
        return cls(*(float(v) for v in values))

    @classmethod
    def from_scores(cls, scores: dict) -> "HealingState":
        return cls(*(float(scores[t]) for t in TARGETS))

    def as_array(self) -> np.ndarray:
        return np.array([self.sct, self.tt, self.ste, self.te, self.tu, self.tise])

    def score(self, target: str) -> float:
        if target not in TARGETS:
            raise KeyError(f"unknown target {target!r}; expected one of {TARGETS}")
        return float(self.as_array()[TARGETS.index(target)])

    def scores(self) -> dict[str, float]:
        return dict(zip(TARGETS, self.as_array().tolist()))

    def mean(self) -> float:
        return float(self.as_array().mean())

    def replace(self, **changes) -> "HealingState":
        values = {k: getattr(self, k) for k in ("sct", "tt", "ste", "te", "tu", "tise")}
        values.update({k.lower(): v for k, v in changes.items()})
        return HealingState(**values)


@dataclass(frozen=True)
class GeometryTable:
    """Coefficients mapping scores to template features (pixels / intensities)."""

    half_thickness: float = 7.0
    half_thickness_per_tt: float = 1.2
    axial_half_width: float = 16.0
    axial_half_width_per_tt: float = 2.2
    axial_half_height: float = 7.0
    axial_half_height_per_tt: float = 0.6
    edge_width: float = 0.35
    edge_width_per_ste: float = 0.45
    core_fraction_per_te: float = 0.08
    halo_per_tise: float = 1.1
    heterogeneity_per_sct: float = 0.016
    disruption_per_tu: float = 0.5
    tendon_level: float = 0.62
    fibre_amplitude: float = 0.16
    background_level: float = 0.30
    fluid_level: float = 0.06
    skin_level: float = 0.75


@dataclass(frozen=True)
class PhantomParams:
    size: int = 96
    band_period: float = 4.0
    speckle_sigma: float = 0.25
    artifact_rates: dict = field(
        default_factory=lambda: {"reverberation": 0.2, "shadowing": 0.2, "refraction": 0.1}
    )
    tendon_geometry: GeometryTable = field(default_factory=GeometryTable)

    def __post_init__(self):
        if self.size < 32:
            raise ValueError(f"phantom size must be at least 32, got {self.size}")
        if not self.band_period > 0:
            raise ValueError(f"band_period must be positive, got {self.band_period}")
        if self.speckle_sigma < 0:
            raise ValueError(f"speckle_sigma must be non-negative, got {self.speckle_sigma}")
        unknown = set(self.artifact_rates) - set(ARTIFACTS)
        if unknown:
            raise ValueError(f"unknown artifacts {sorted(unknown)}; expected {ARTIFACTS}")
        for name, rate in self.artifact_rates.items():
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"artifact rate {name}={rate} outside [0, 1]")
        if not all(math.isfinite(v) for v in asdict(self.tendon_geometry).values()):
            raise ValueError("geometry coefficients must be finite")

    def rate(self, artifact: str) -> float:
        return float(self.artifact_rates.get(artifact, 0.0))

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "band_period": self.band_period,
            "speckle_sigma": self.speckle_sigma,
            "artifact_rates": {k: self.rate(k) for k in ARTIFACTS},
            "tendon_geometry": asdict(self.tendon_geometry),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomParams":
        data = dict(data)
        if "tendon_geometry" in data:
            data["tendon_geometry"] = GeometryTable(**data["tendon_geometry"])
        return cls(**data)

    @classmethod
    def noiseless(cls, **kwargs) -> "PhantomParams":
        return cls(speckle_sigma=0.0, artifact_rates={a: 0.0 for a in ARTIFACTS}, **kwargs)


ARTIFACTS = ("reverberation", "shadowing", "refraction")


@dataclass(frozen=True)
class SliceGeometry:
    """Seed-drawn placement of the tendon and phases of the analytic patterns."""

    row_offset: float
    col_offset: float
    fibre_phase: float
    fibre_phase_x: float
    heterogeneity: tuple  # (fy, fx, phase) triples
    disruption: tuple  # phases
    background_phase: float


@dataclass
class SliceImage:
    pixels: np.ndarray
    plane: str
    patient_id: str
    timepoint: int
    slice_index: int
    seed: int


@dataclass
class Exam:
    patient_id: str
    timepoint: int
    plane: str
    slices: list[SliceImage]
    ground_truth: HealingState

    @property
    def kind(self) -> str:
        return "healthy" if self.timepoint == HEALTHY_TIMEPOINT else "patient"

    @property
    def exam_id(self) -> str:
        return exam_id(self.patient_id, self.timepoint, self.plane)

    def stack(self) -> np.ndarray:
        """Slices as an (N, 1, H, W) array."""
        return np.stack([s.pixels for s in self.slices])[:, None]


def exam_id(patient_id: str, timepoint: int, plane: str) -> str:
    return f"{patient_id}_t{timepoint}_{plane}"


# --------------------------------------------------------------------------
# templates


def slice_geometry(seed: int) -> SliceGeometry:
    rng = make_rng(derive_seed(seed, "geometry"))
    row_offset, col_offset = rng.uniform(-4.0, 4.0, size=2)
    fibre_phase, fibre_phase_x = rng.uniform(0.0, 2 * np.pi, size=2)
    freqs = rng.uniform(1 / 18, 1 / 9, size=(3, 2)) * rng.choice([-1.0, 1.0], size=(3, 2))
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    heterogeneity = tuple((float(f[0]), float(f[1]), float(p)) for f, p in zip(freqs, phases))
    disruption = tuple(float(v) for v in rng.uniform(0.0, 2 * np.pi, size=3))
    background_phase = float(rng.uniform(0.0, 2 * np.pi))
    return SliceGeometry(
        float(row_offset),
        float(col_offset),
        float(fibre_phase),
        float(fibre_phase_x),
        heterogeneity,
        disruption,
        background_phase,
    )


def _soft_step(x: np.ndarray, width: float) -> np.ndarray:
    return expit(x / width)


def _shell(inner_distance: np.ndarray, thickness: float) -> np.ndarray:
    """Soft indicator of 0 < d < thickness; identically zero for zero thickness."""
    if thickness <= 0:
        return np.zeros_like(inner_distance)
    return np.clip(_soft_step(thickness - inner_distance, 0.5) - _soft_step(-inner_distance, 0.5), 0.0, 1.0)


def template(state: HealingState, plane: str, params: PhantomParams, geometry: SliceGeometry) -> np.ndarray:
    """Noise-free phantom slice: the analytic texture sampled at pixel centres."""
    if plane not in PLANES:
        raise ValueError(f"plane must be one of {PLANES}, got {plane!r}")
    g = params.tendon_geometry
    n = params.size
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    yc = 0.5 * n + geometry.row_offset
    xc = 0.5 * n + geometry.col_offset
    period = params.band_period

    # tissue background with faint fascia layers, bright skin line on top
    img = g.background_level + 0.04 * np.sin(2 * np.pi * y / 13.0 + geometry.background_phase)
    skin = _soft_step(3.0 - y, 0.8)
    img = img * (1 - skin) + g.skin_level * skin

    disruption = g.disruption_per_tu * (state.tu - 1.0)
    d1, d2, d3 = geometry.disruption
    wobble = np.sin(2 * np.pi * x / 11.0 + d1) * np.sin(2 * np.pi * y / 7.0 + d2)
    breaks = 0.5 * (1.0 + np.sin(2 * np.pi * x / 9.0 + 2 * np.pi * y / 23.0 + d3))
    amplitude = g.fibre_amplitude * np.clip(1.0 - 0.1 * (state.tu - 1.0) * breaks, 0.0, 1.0)

    if plane == "sagittal":
        half = g.half_thickness + g.half_thickness_per_tt * (state.tt - 1.0)
        inside = half - np.abs(y - yc)  # signed distance to the tendon edge
        fibres = amplitude * np.cos(2 * np.pi * (y - yc) / period + geometry.fibre_phase + disruption * wobble)
        core_ry = g.core_fraction_per_te * (state.te - 1.0) * half
        core_rx = 3.0 * core_ry
        scale = half
    else:
        ax = g.axial_half_width + g.axial_half_width_per_tt * (state.tt - 1.0)
        ay = g.axial_half_height + g.axial_half_height_per_tt * (state.tt - 1.0)
        rho = np.sqrt(((y - yc) / ay) ** 2 + ((x - xc) / ax) ** 2)
        inside = (1.0 - rho) * min(ax, ay)
        # dot pattern carries a quarter of the stripe variance; boost it
        fibres = 1.8 * amplitude * (
            np.cos(2 * np.pi * (y - yc) / period + geometry.fibre_phase + disruption * wobble)
            * np.cos(2 * np.pi * (x - xc) / period + geometry.fibre_phase_x + disruption * wobble)
        )
        core_ry = g.core_fraction_per_te * (state.te - 1.0) * ay
        core_rx = core_ry * ax / ay
        scale = ay

    edge = g.edge_width + g.edge_width_per_ste * (state.ste - 1.0)
    tendon = _soft_step(inside, edge)

    heterogeneity = np.zeros_like(img)
    for fy, fx, phase in geometry.heterogeneity:
        heterogeneity += np.sin(2 * np.pi * (fy * y + fx * x) + phase)
    heterogeneity *= g.heterogeneity_per_sct * (state.sct - 1.0)

    tendon_level = g.tendon_level + fibres + heterogeneity
    if core_ry > 0:
        rc = np.sqrt(((y - yc) / core_ry) ** 2 + ((x - xc) / core_rx) ** 2)
        core = _soft_step(1.0 - rc, 0.15)
        tendon_level = tendon_level * (1 - core) + g.fluid_level * core

    halo = _shell(-inside, g.halo_per_tise * (state.tise - 1.0) * scale / g.half_thickness)
    img = img * (1 - halo) + g.fluid_level * halo
    img = img * (1 - tendon) + tendon_level * tendon
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------------------
# artifacts and speckle


def apply_artifacts(image: np.ndarray, params: PhantomParams, seed: int) -> np.ndarray:
    """Reverberation lines, acoustic shadow columns and refraction shifts.

    Every artifact draws its trigger and placement unconditionally, so the
    stream layout does not depend on the rates.
    """
    rng = make_rng(derive_seed(seed, "artifacts"))
    out = image.copy()
    n = out.shape[0]
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)

    fire = rng.random()
    first, spacing = rng.uniform(6.0, 14.0), rng.uniform(6.0, 10.0)
    if fire < params.rate("reverberation"):
        for j in range(3):
            line = np.exp(-0.5 * ((y - first - j * spacing) / 0.7) ** 2)
            out = out + 0.25 * 0.6**j * line

    fire = rng.random()
    x0, width, depth = rng.uniform(8.0, n - 16.0), rng.uniform(4.0, 10.0), rng.uniform(10.0, 40.0)
    if fire < params.rate("shadowing"):
        column = _soft_step(x - x0, 0.7) * _soft_step(x0 + width - x, 0.7)
        below = _soft_step(y - depth, 1.5)
        out = out * (1.0 - 0.65 * column * below)

    fire = rng.random()
    x1, strip, shift, depth = (
        int(rng.integers(8, n - 24)),
        int(rng.integers(8, 17)),
        int(rng.choice([-3, -2, 2, 3])),
        int(rng.integers(20, 50)),
    )
    if fire < params.rate("refraction"):
        block = out[depth:, x1 : x1 + strip]
        out[depth:, x1 : x1 + strip] = np.roll(block, shift, axis=1)
        out[depth:, x1] *= 0.8
        out[depth:, x1 + strip - 1] *= 0.8
    return np.clip(out, 0.0, 1.0)


def apply_speckle(image: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Multiplicative log-normal speckle with unit median; ``sigma`` is the log-std."""
    if sigma < 0:
        raise ValueError(f"speckle sigma must be non-negative, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    m = speckle_multipliers(image.shape, sigma, seed)
    return np.clip(image * m, 0.0, 1.0)


def speckle_multipliers(shape, sigma: float, seed: int) -> np.ndarray:
    return np.exp(sigma * make_rng(seed).standard_normal(shape))


def generate_slice(
    state: HealingState,
    plane: str,
    params: PhantomParams | None = None,
    seed: int = 0,
    patient_id: str = "",
    timepoint: int = HEALTHY_TIMEPOINT,
    slice_index: int = 0,
) -> SliceImage:
    if not isinstance(state, HealingState):
        state = HealingState.from_array(state)
    params = params or PhantomParams()
    geometry = slice_geometry(seed)
    img = template(state, plane, params, geometry)
    img = apply_artifacts(img, params, seed)
    img = apply_speckle(img, params.speckle_sigma, derive_seed(seed, "speckle"))
    return SliceImage(img, plane, patient_id, timepoint, slice_index, int(seed))


# --------------------------------------------------------------------------
# summary statistics used to verify the knob directions


def summary_statistics(pixels: np.ndarray, geometry: SliceGeometry, plane: str = "sagittal") -> dict[str, float]:
    """Image measurements that respond monotonically to single knobs.

    band_width               mean per-column count of pixels above 0.45
                             after a 5x5 box filter (skin rows excluded)
    edge_sharpness           max absolute step of the row profile averaged
                             over the central 24 columns, within 20 rows of
                             the tendon centre, after a 4-row box filter
                             that cancels the fibre stripes
    hypoechoic_area          count of 5x5-box-filtered pixels below 0.2
    fibre_continuity         correlation of pixels 4 columns (one fibre
                             period) apart in the central 9 rows x 28 columns
    intratendinous_variance  variance of 3x3-box-filtered pixels in the
                             central tendon rows (+-4) and 32 columns
    """
    n = pixels.shape[0]
    yc = int(round(0.5 * n + geometry.row_offset))
    xc = int(round(0.5 * n + geometry.col_offset))
    smooth5 = uniform_filter(pixels, size=5, mode="nearest")
    smooth3 = uniform_filter(pixels, size=3, mode="nearest")
    band = (smooth5[8:] > 0.45).sum(axis=0).mean()
    profile = uniform_filter1d(pixels[:, xc - 12 : xc + 12].mean(axis=1), 4, mode="nearest")
    sharpness = np.abs(np.diff(profile[max(yc - 20, 8) : yc + 21])).max()
    dark = (smooth5[8:] < 0.2).sum()
    rows = pixels[yc - 4 : yc + 5, xc - 14 : xc + 14]
    a, b = rows[:, :-4].ravel(), rows[:, 4:].ravel()
    continuity = np.corrcoef(a, b)[0, 1]
    variance = smooth3[yc - 4 : yc + 5, xc - 16 : xc + 16].var()
    return {
        "band_width": float(band),
        "edge_sharpness": float(sharpness),
        "hypoechoic_area": float(dark),
        "fibre_continuity": float(continuity),
        "intratendinous_variance": float(variance),
    }


# statistic each knob moves, and the direction (+1 rises with the score)
KNOB_STATISTICS = {
    "TT": ("band_width", +1),
    "STE": ("edge_sharpness", -1),
    "TE": ("hypoechoic_area", +1),
    "TisE": ("hypoechoic_area", +1),
    "TU": ("fibre_continuity", -1),
    "SCT": ("intratendinous_variance", +1),
}


# --------------------------------------------------------------------------
# longitudinal trajectories and datasets


def healing_trajectory(patient_seed: int, profile: str = "typical") -> list[HealingState]:
    """Ten non-increasing states, one per exam timepoint.

    Each score decays from a severe start in [5, 7] toward a near-healthy end
    in [1, 2.6] along a normalized exponential whose time constant is the
    profile's, scaled per score. Jitter in [-0.4, 0.4] (zero at the first
    exam) is added and a running minimum restores monotonicity. The draws do
    not depend on ``profile``.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    rng = make_rng(derive_seed(patient_seed, "trajectory"))
    start = rng.uniform(5.0, 7.0, size=6)
    end = rng.uniform(1.0, 2.6, size=6)
    rate = rng.uniform(0.7, 1.4, size=6)
    jitter = rng.uniform(-MAX_JITTER, MAX_JITTER, size=(len(TIMEPOINT_WEEKS), 6))
    jitter[0] = 0.0
    weeks = np.array(TIMEPOINT_WEEKS)[:, None]
    tau = PROFILES[profile] * rate[None, :]
    horizon = TIMEPOINT_WEEKS[-1]
    decay = (np.exp(-weeks / tau) - np.exp(-horizon / tau)) / (1.0 - np.exp(-horizon / tau))
    scores = end + (start - end) * decay + jitter
    scores = np.clip(np.minimum.accumulate(scores, axis=0), 1.0, 7.0)
    return [HealingState.from_array(row) for row in scores]


def subject_ids(n_patients: int, n_healthy: int) -> tuple[list[str], list[str]]:
    return [f"P{i:03d}" for i in range(n_patients)], [f"H{i:03d}" for i in range(n_healthy)]


def patient_profile(master_seed: int, patient_id: str) -> str:
    names = sorted(PROFILES)
    return names[derive_seed(master_seed, patient_id, "profile") % len(names)]


def generate_exams(
    n_patients: int,
    n_healthy: int,
    slices_per_exam: int = 10,
    planes: Iterable[str] = PLANES,
    params: PhantomParams | None = None,
    master_seed: int = 0,
) -> list[Exam]:
    """In-memory phantom cohort: ten exams per patient and plane, one per volunteer."""
    if n_patients < 0 or n_healthy < 0 or n_patients + n_healthy == 0:
        raise ValueError("need a positive number of subjects")
    if slices_per_exam < 1:
        raise ValueError(f"slices_per_exam must be positive, got {slices_per_exam}")
    planes = tuple(planes)
    for plane in planes:
        if plane not in PLANES:
            raise ValueError(f"plane must be one of {PLANES}, got {plane!r}")
    params = params or PhantomParams()
    patients, healthy = subject_ids(n_patients, n_healthy)
    schedule: list[tuple[str, int, HealingState]] = []
    for pid in patients:
        states = healing_trajectory(derive_seed(master_seed, pid), patient_profile(master_seed, pid))
        schedule.extend((pid, tp, state) for tp, state in enumerate(states))
    schedule.extend((hid, HEALTHY_TIMEPOINT, HealingState.healthy()) for hid in healthy)

    exams = []
    for plane in planes:
        for pid, tp, state in schedule:
            slices = [
                generate_slice(state, plane, params, derive_seed(master_seed, pid, tp, plane, i), pid, tp, i)
                for i in range(slices_per_exam)
            ]
            exams.append(Exam(pid, tp, plane, slices, state))
    return exams


def generate_dataset(
    n_patients: int,
    n_healthy: int,
    slices_per_exam: int,
    planes: Iterable[str],
    params: PhantomParams | None,
    master_seed: int,
    root: str | Path,
) -> Path:
    """Generate a cohort and write it in the on-disk dataset layout."""
    from .fileio import write_dataset

    params = params or PhantomParams()
    exams = generate_exams(n_patients, n_healthy, slices_per_exam, planes, params, master_seed)
    return write_dataset(exams, root, generator={"master_seed": master_seed, "params": params.to_dict()})
