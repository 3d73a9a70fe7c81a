"""Seeded synthetic FLIm datasets with known ground truth.

Every point carries a two-exponential decay per spectral band, convolved with
a Gaussian instrument response and sampled at ``dt``. Margins are labelled by
class, points inherit their margin's label, and label corruption is logged so
it can be undone exactly.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, ParameterError
from .features import BANDS

DEFAULT_DT = 0.4
DEFAULT_N_SAMPLES = 200
FWHM_TO_SD = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))

TUMOR_DENSITY_CLASSES = (
    "absent", "very low", "low", "low-moderate", "moderate", "moderate-high", "high",
)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    dt: float = DEFAULT_DT
    band: str = "bandA"
    noise_sd: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or len(s) < 64:
            raise ParameterError("waveform needs a 1-D record of at least 64 samples")
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(s)):
            raise ParameterError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self.samples)) * self.dt


@dataclass(frozen=True)
class ClassDecayModel:
    """Decay parameters of one tissue class.

    ``fraction_mean``/``fraction_sd`` hold one entry per band and describe the
    amplitude fraction of the short-lifetime component.
    """

    class_index: int
    lifetimes: tuple[float, float]
    fraction_mean: tuple[float, ...]
    fraction_sd: tuple[float, ...]
    amplitude_mean: float = 1.0

    def __post_init__(self):
        t1, t2 = self.lifetimes
        if not (np.isfinite(t1) and np.isfinite(t2)) or not 0 < t1 <= t2:
            raise ParameterError(f"need 0 < tau1 <= tau2, got {self.lifetimes}")
        for f in self.fraction_mean:
            if not 0.0 <= f <= 1.0:
                raise ParameterError(f"fraction mean {f} outside [0, 1]")
        if any(sd < 0 or not np.isfinite(sd) for sd in self.fraction_sd):
            raise ParameterError("fraction sd must be finite and >= 0")
        if len(self.fraction_sd) != len(self.fraction_mean):
            raise ParameterError("fraction_mean and fraction_sd lengths differ")
        if not self.amplitude_mean > 0:
            raise ParameterError("amplitude_mean must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ClassDecayModel":
        return cls(
            class_index=int(d["class_index"]),
            lifetimes=tuple(float(v) for v in d["lifetimes"]),
            fraction_mean=tuple(float(v) for v in d["fraction_mean"]),
            fraction_sd=tuple(float(v) for v in d["fraction_sd"]),
            amplitude_mean=float(d.get("amplitude_mean", 1.0)),
        )


@dataclass(frozen=True)
class PointDecay:
    """Concrete decay of one point: shared lifetimes, per-band short fraction."""

    lifetimes: tuple[float, float]
    fractions: tuple[float, ...]
    amplitude: float = 1.0
    signal_scale: float = 1.0

    def impulse_response(self, band_index: int, t: np.ndarray) -> np.ndarray:
        f = self.fractions[band_index]
        t1, t2 = self.lifetimes
        return self.amplitude * (f * np.exp(-t / t1) + (1.0 - f) * np.exp(-t / t2))


@dataclass(frozen=True)
class ConfounderSpec:
    kind: str
    magnitude: float
    affected_fraction: float = 1.0
    direction: int = -1

    def __post_init__(self):
        if self.kind not in ("grey_matter", "blood"):
            raise ParameterError(f"unknown confounder kind {self.kind!r}")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ParameterError(f"confounder magnitude {self.magnitude} outside [0, 1]")
        if not 0.0 <= self.affected_fraction <= 1.0:
            raise ParameterError("affected_fraction outside [0, 1]")
        if self.direction not in (-1, 1):
            raise ParameterError("direction must be -1 or +1")


@dataclass(frozen=True)
class CorruptionEntry:
    margin_id: str
    true_label: int
    corrupted_label: int


@dataclass
class CorruptionLog:
    entries: list[CorruptionEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.margin_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InputError("corruption log has duplicate margin ids")
        for e in self.entries:
            if e.true_label == e.corrupted_label:
                raise InputError(f"margin {e.margin_id}: corrupted label equals true label")

    def __len__(self):
        return len(self.entries)

    def margin_ids(self) -> set[str]:
        return {e.margin_id for e in self.entries}

    def to_list(self) -> list[dict]:
        return [asdict(e) for e in self.entries]

    @classmethod
    def from_list(cls, items) -> "CorruptionLog":
        return cls([CorruptionEntry(str(d["margin_id"]), int(d["true_label"]), int(d["corrupted_label"])) for d in items])


@dataclass
class MarginRecord:
    margin_id: str
    patient_id: str
    label: int
    true_label: int
    n_points: int
    first_point: int
    tags: list[str] = field(default_factory=list)
    confounder: str = ""


@dataclass
class DatasetManifest:
    """Patients -> margins -> points. Point labels are always derived from margins."""

    class_names: list[str]
    margins: list[MarginRecord]
    corruption_log: CorruptionLog = field(default_factory=CorruptionLog)
    dt: float = DEFAULT_DT
    n_samples: int = DEFAULT_N_SAMPLES
    bands: tuple[str, ...] = BANDS
    seed: int | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_points(self) -> int:
        return sum(m.n_points for m in self.margins)

    @property
    def patient_ids(self) -> list[str]:
        seen = []
        for m in self.margins:
            if m.patient_id not in seen:
                seen.append(m.patient_id)
        return seen

    def margin(self, margin_id: str) -> MarginRecord:
        for m in self.margins:
            if m.margin_id == margin_id:
                return m
        raise KeyError(margin_id)

    def point_labels(self) -> np.ndarray:
        return np.repeat([m.label for m in self.margins], [m.n_points for m in self.margins]).astype(int)

    def point_true_labels(self) -> np.ndarray:
        return np.repeat([m.true_label for m in self.margins], [m.n_points for m in self.margins]).astype(int)

    def point_margin_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.margins)), [m.n_points for m in self.margins])

    def point_margin_ids(self) -> np.ndarray:
        return np.repeat(np.array([m.margin_id for m in self.margins], dtype=object), [m.n_points for m in self.margins])

    def point_patient_ids(self) -> np.ndarray:
        return np.repeat(np.array([m.patient_id for m in self.margins], dtype=object), [m.n_points for m in self.margins])

    def point_tags(self) -> list[str]:
        out = []
        for m in self.margins:
            out.extend(m.tags if m.tags else [""] * m.n_points)
        return out

    def copy(self) -> "DatasetManifest":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        patients = []
        by_patient: dict[str, list] = {}
        for m in self.margins:
            points = []
            tags = m.tags if m.tags else [""] * m.n_points
            for j in range(m.n_points):
                points.append({
                    "point_id": m.first_point + j, "index": j,
                    "label": m.label, "true_label": m.true_label, "tag": tags[j],
                })
            entry = {
                "margin_id": m.margin_id, "label": m.label, "true_label": m.true_label,
                "confounder": m.confounder, "points": points,
            }
            if m.patient_id not in by_patient:
                by_patient[m.patient_id] = []
                patients.append({"patient_id": m.patient_id, "margins": by_patient[m.patient_id]})
            by_patient[m.patient_id].append(entry)
        return {
            "format": "flimcl-manifest/1",
            "class_names": list(self.class_names),
            "dt": self.dt, "n_samples": self.n_samples, "bands": list(self.bands),
            "seed": self.seed,
            "patients": patients,
            "corruption_log": self.corruption_log.to_list(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        margins = []
        first = 0
        ids = set()
        for p in d["patients"]:
            if p["patient_id"] in ids:
                from .errors import ManifestError
                raise ManifestError(f"duplicate patient id {p['patient_id']!r}")
            ids.add(p["patient_id"])
            for m in p["margins"]:
                pts = m["points"]
                margins.append(MarginRecord(
                    margin_id=m["margin_id"], patient_id=p["patient_id"],
                    label=int(m["label"]), true_label=int(m["true_label"]),
                    n_points=len(pts), first_point=first,
                    tags=[pt.get("tag", "") for pt in pts], confounder=m.get("confounder", ""),
                ))
                first += len(pts)
        return cls(
            class_names=list(d["class_names"]), margins=margins,
            corruption_log=CorruptionLog.from_list(d.get("corruption_log", [])),
            dt=float(d["dt"]), n_samples=int(d["n_samples"]), bands=tuple(d["bands"]),
            seed=d.get("seed"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# waveforms


def gaussian_irf(fwhm: float, dt: float = DEFAULT_DT, n_samples: int = DEFAULT_N_SAMPLES,
                 delay: float | None = None) -> np.ndarray:
    """Unit-area Gaussian instrument response. ``fwhm == 0`` gives a delta at t=0."""
    if not np.isfinite(fwhm) or fwhm < 0:
        raise ParameterError(f"irf_fwhm must be finite and >= 0, got {fwhm}")
    irf = np.zeros(n_samples)
    if fwhm == 0:
        irf[0] = 1.0
        return irf
    sd = fwhm * FWHM_TO_SD
    if delay is None:
        delay = max(2.0, 4.0 * sd)
    t = np.arange(n_samples) * dt
    irf = np.exp(-0.5 * ((t - delay) / sd) ** 2)
    return irf / irf.sum()


def draw_point_decay(model: ClassDecayModel, rng: np.random.Generator,
                     fraction_offset: Sequence[float] | None = None,
                     lifetime_scale: float = 1.0, amplitude_sd: float = 0.0) -> PointDecay:
    fr = []
    for b, (mu, sd) in enumerate(zip(model.fraction_mean, model.fraction_sd)):
        off = fraction_offset[b] if fraction_offset is not None else 0.0
        fr.append(float(np.clip(mu + off + sd * rng.standard_normal(), 0.0, 1.0)))
    amp = model.amplitude_mean * float(np.exp(amplitude_sd * rng.standard_normal())) if amplitude_sd else model.amplitude_mean
    t1, t2 = model.lifetimes
    return PointDecay(lifetimes=(t1 * lifetime_scale, t2 * lifetime_scale), fractions=tuple(fr), amplitude=amp)


def render_waveform(decay: PointDecay, band: str, irf: np.ndarray, snr_db: float,
                    rng: np.random.Generator, dt: float = DEFAULT_DT,
                    bands: Sequence[str] = BANDS) -> Waveform:
    """Noiseless convolution of the decay with ``irf`` plus peak-referenced Gaussian noise.

    The noise level is set from the unconfounded peak so that ``signal_scale``
    lowers the SNR in proportion.
    """
    if band not in bands:
        raise ParameterError(f"unknown band {band!r}")
    n = len(irf)
    t = np.arange(n) * dt
    clean = np.convolve(irf, decay.impulse_response(list(bands).index(band), t))[:n]
    if np.isinf(snr_db) and snr_db > 0:
        return Waveform(clean * decay.signal_scale, dt=dt, band=band)
    if not np.isfinite(snr_db):
        raise ParameterError(f"snr_db must be finite or +inf, got {snr_db}")
    sd = clean.max() / 10.0 ** (snr_db / 20.0)
    noisy = clean * decay.signal_scale + sd * rng.standard_normal(n)
    return Waveform(noisy, dt=dt, band=band, noise_sd=float(sd))


def synth_waveform(model: ClassDecayModel, band: str = "bandA", irf_fwhm: float = 1.0,
                   snr_db: float = np.inf, seed: int = 0, dt: float = DEFAULT_DT,
                   n_samples: int = DEFAULT_N_SAMPLES, fraction: float | None = None,
                   irf_delay: float | None = None) -> Waveform:
    """One waveform from a class model; ``fraction`` pins the short-component fraction."""
    for name, v in (("irf_fwhm", irf_fwhm), ("dt", dt)):
        if not np.isfinite(v):
            raise ParameterError(f"{name} must be finite")
    if np.isnan(snr_db):
        raise ParameterError("snr_db is NaN")
    rng = np.random.default_rng(seed)
    decay = draw_point_decay(model, rng)
    if fraction is not None:
        decay = replace(decay, fractions=tuple(float(fraction) for _ in decay.fractions))
    irf = gaussian_irf(irf_fwhm, dt, n_samples, irf_delay)
    return render_waveform(decay, band, irf, snr_db, rng, dt=dt)


def apply_confounder(target, spec: ConfounderSpec, seed: int = 0, neighbor: PointDecay | None = None):
    """Apply grey-matter or blood contamination.

    ``target`` may be a :class:`PointDecay` (grey matter needs ``neighbor``,
    the decay drawn from the adjacent class), a :class:`Waveform` (blood only),
    or a list of ``(decay, neighbor)`` pairs for a whole margin, in which case
    ``spec.affected_fraction`` of them, chosen by ``seed``, are modified.
    Returns the modified object(s); the mask of affected points is returned
    alongside for margins.
    """
    if spec.kind not in ("grey_matter", "blood"):
        raise ParameterError(f"unknown confounder kind {spec.kind!r}")
    m = spec.magnitude
    scale = 1.0 - 0.8 * m

    if isinstance(target, list):
        rng = np.random.default_rng(seed)
        n = len(target)
        k = int(np.floor(spec.affected_fraction * n + 0.5))
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=k, replace=False)] = True
        out = [apply_confounder(d, spec, seed, nb) if hit else d for (d, nb), hit in zip(target, mask)]
        return out, mask

    if isinstance(target, Waveform):
        if spec.kind != "blood":
            raise ParameterError("grey matter needs decay parameters, not a rendered waveform")
        if m == 0:
            return target
        rng = np.random.default_rng(seed)
        extra = target.noise_sd * np.sqrt(max(0.0, 1.0 - scale ** 2))
        samples = target.samples * scale + extra * rng.standard_normal(len(target.samples))
        return Waveform(samples, dt=target.dt, band=target.band, noise_sd=target.noise_sd)

    if isinstance(target, PointDecay):
        if m == 0:
            return target
        if spec.kind == "blood":
            return replace(target, signal_scale=target.signal_scale * scale)
        if neighbor is None:
            raise ParameterError("grey matter shift needs the neighboring class decay")
        lt = tuple((1 - m) * a + m * b for a, b in zip(target.lifetimes, neighbor.lifetimes))
        fr = tuple((1 - m) * a + m * b for a, b in zip(target.fractions, neighbor.fractions))
        amp = (1 - m) * target.amplitude + m * neighbor.amplitude
        return replace(target, lifetimes=lt, fractions=fr, amplitude=amp)

    raise ParameterError(f"cannot apply a confounder to {type(target).__name__}")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SimConfig:
    n_patients: int = 30
    n_margins: int | None = 180
    margins_per_patient: tuple[int, int] = (3, 10)
    points_per_margin: tuple[int, int] = (20, 40)
    class_names: list[str] = field(default_factory=lambda: list(TUMOR_DENSITY_CLASSES))
    class_proportions: list[float] | None = None
    class_models: list[ClassDecayModel] = field(default_factory=list)
    dt: float = DEFAULT_DT
    n_samples: int = DEFAULT_N_SAMPLES
    irf_fwhm: float = 1.0
    irf_delay: float | None = None
    snr_db: tuple[float, float] = (30.0, 40.0)
    patient_lifetime_sd: float = 0.0
    margin_fraction_sd: float = 0.0
    amplitude_sd: float = 0.0
    heterogeneity: float = 0.0
    grey_matter_rate: float = 0.0
    grey_matter_magnitude: tuple[float, float] = (0.5, 1.0)
    grey_matter_affected: float = 0.5
    grey_matter_direction: int = -1
    blood_rate: float = 0.0
    blood_magnitude: tuple[float, float] = (0.5, 1.0)
    blood_affected: float = 0.5
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        models = d.pop("class_models", None)
        ladder = d.pop("ladder", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"sim: unknown field(s) {sorted(unknown)}")
        for key in ("margins_per_patient", "points_per_margin", "snr_db", "grey_matter_magnitude", "blood_magnitude"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        if models is not None:
            cfg.class_models = [ClassDecayModel.from_dict(m) for m in models]
        elif ladder is not None:
            cfg.class_models = ladder_class_models(len(cfg.class_names), **ladder)
        return cfg


def ladder_class_models(n_classes: int, lifetimes_low: Sequence[float] = (1.0, 6.0),
                        lifetimes_high: Sequence[float] = (0.8, 4.5),
                        fraction_low: Sequence[float] = (0.30, 0.55),
                        fraction_high: Sequence[float] = (0.70, 0.25),
                        fraction_sd: Sequence[float] | None = None,
                        amplitude_mean: float = 1.0) -> list[ClassDecayModel]:
    """Ordered ladder interpolating linearly from the lowest to the highest class.

    With ``fraction_sd`` omitted each band's spread equals one ladder step, so
    adjacent classes overlap by about one standard deviation.
    """
    if n_classes < 2:
        raise ConfigError("a ladder needs at least two classes")
    out = []
    fl, fh = np.asarray(fraction_low, float), np.asarray(fraction_high, float)
    step = np.abs(fh - fl) / (n_classes - 1)
    sd = np.asarray(fraction_sd, float) if fraction_sd is not None else step
    for c in range(n_classes):
        w = c / (n_classes - 1)
        lt = tuple(float((1 - w) * a + w * b) for a, b in zip(lifetimes_low, lifetimes_high))
        fr = tuple(float(v) for v in (1 - w) * fl + w * fh)
        out.append(ClassDecayModel(c, lt, fr, tuple(float(v) for v in sd), amplitude_mean))
    return out


def _class_counts(n_margins: int, proportions: Sequence[float]) -> np.ndarray:
    p = np.asarray(proportions, float)
    if np.any(p < 0) or p.sum() <= 0:
        raise ConfigError("class proportions must be nonnegative with a positive sum")
    raw = p / p.sum() * n_margins
    counts = np.floor(raw).astype(int)
    rem = n_margins - counts.sum()
    order = np.lexsort((np.arange(len(p)), -(raw - counts)))
    counts[order[:rem]] += 1
    return counts


def _margins_per_patient(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.margins_per_patient
    per = rng.integers(lo, hi + 1, size=cfg.n_patients)
    if cfg.n_margins is None:
        return per
    if cfg.n_margins < cfg.n_patients:
        raise ConfigError("fewer margins than patients")
    # rescale to the requested total while keeping every patient >= 1
    per = np.maximum(1, np.floor(per / per.sum() * cfg.n_margins).astype(int))
    while per.sum() < cfg.n_margins:
        per[int(rng.integers(cfg.n_patients))] += 1
    while per.sum() > cfg.n_margins:
        i = int(rng.choice(np.flatnonzero(per > 1)))
        per[i] -= 1
    return per


def synth_manifest(cfg: SimConfig) -> DatasetManifest:
    """Margin layout and labels only (no waveforms)."""
    C = len(cfg.class_names)
    if C < 2 or not cfg.class_models:
        raise ConfigError("empty class roster: need >= 2 classes with decay models")
    if len(cfg.class_models) != C:
        raise ConfigError(f"{len(cfg.class_models)} class models for {C} classes")
    if cfg.n_patients < 2:
        raise ConfigError("need at least 2 patients")
    rng = np.random.default_rng([cfg.seed, 0])
    per_patient = _margins_per_patient(cfg, rng)
    total = int(per_patient.sum())
    props = cfg.class_proportions if cfg.class_proportions is not None else [1.0] * C
    if len(props) != C:
        raise ConfigError("class_proportions length differs from class roster")
    counts = _class_counts(total, props)
    if np.any(counts == 0):
        missing = [cfg.class_names[i] for i in np.flatnonzero(counts == 0)]
        raise ConfigError(f"classes without margins: {missing}")
    labels = rng.permutation(np.repeat(np.arange(C), counts))
    lo, hi = cfg.points_per_margin
    n_points = rng.integers(lo, hi + 1, size=total)

    margins = []
    k = 0
    first = 0
    width = len(str(cfg.n_patients))
    for p, n_m in enumerate(per_patient):
        pid = f"P{p + 1:0{width}d}"
        for j in range(n_m):
            margins.append(MarginRecord(
                margin_id=f"{pid}-M{j + 1:02d}", patient_id=pid,
                label=int(labels[k]), true_label=int(labels[k]),
                n_points=int(n_points[k]), first_point=first,
            ))
            first += int(n_points[k])
            k += 1
    return DatasetManifest(class_names=list(cfg.class_names), margins=margins,
                           dt=cfg.dt, n_samples=cfg.n_samples, seed=cfg.seed)


def _neighbor_class(c: int, direction: int, n_classes: int) -> int:
    nb = c + direction
    if nb < 0 or nb >= n_classes:
        nb = c - direction
    return nb


def synth_dataset(cfg: SimConfig) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Manifest plus raw waveforms, one ``(n_points, n_samples)`` array per band.

    Margins are generated from independent per-margin random streams, so the
    result does not depend on generation order.
    """
    manifest = synth_manifest(cfg)
    C = manifest.n_classes
    irf = gaussian_irf(cfg.irf_fwhm, cfg.dt, cfg.n_samples, cfg.irf_delay)
    t = np.arange(cfg.n_samples) * cfg.dt
    waves = {b: np.empty((manifest.n_points, cfg.n_samples)) for b in manifest.bands}
    patient_index = {pid: i for i, pid in enumerate(manifest.patient_ids)}
    patient_scale = {}
    for pid, i in patient_index.items():
        prng = np.random.default_rng([cfg.seed, 1, i])
        patient_scale[pid] = float(np.exp(cfg.patient_lifetime_sd * prng.standard_normal()))

    for mi, m in enumerate(manifest.margins):
        rng = np.random.default_rng([cfg.seed, 2, mi])
        c = m.true_label
        offset = cfg.margin_fraction_sd * rng.standard_normal(len(manifest.bands))
        lt_scale = patient_scale[m.patient_id]
        pairs = []
        for _ in range(m.n_points):
            src = c
            if cfg.heterogeneity > 0 and rng.random() < cfg.heterogeneity:
                src = _neighbor_class(c, int(rng.choice([-1, 1])), C)
            d = draw_point_decay(cfg.class_models[src], rng, offset, lt_scale, cfg.amplitude_sd)
            nb_c = _neighbor_class(c, cfg.grey_matter_direction, C)
            nb = draw_point_decay(cfg.class_models[nb_c], rng, offset, lt_scale, cfg.amplitude_sd)
            pairs.append((d, nb))
        tags = [""] * m.n_points
        decays = [d for d, _ in pairs]
        u = rng.random(2)
        if u[0] < cfg.grey_matter_rate:
            spec = ConfounderSpec("grey_matter", float(rng.uniform(*cfg.grey_matter_magnitude)),
                                  cfg.grey_matter_affected, cfg.grey_matter_direction)
            decays, mask = apply_confounder(pairs, spec, seed=int(rng.integers(2**31)))
            pairs = list(zip(decays, [nb for _, nb in pairs]))
            tags = ["grey_matter" if hit else tg for hit, tg in zip(mask, tags)]
            m.confounder = "grey_matter"
        if u[1] < cfg.blood_rate:
            spec = ConfounderSpec("blood", float(rng.uniform(*cfg.blood_magnitude)), cfg.blood_affected)
            decays, mask = apply_confounder(pairs, spec, seed=int(rng.integers(2**31)))
            tags = [("blood" if not tg else tg + "+blood") if hit else tg for hit, tg in zip(mask, tags)]
            m.confounder = "+".join(x for x in (m.confounder, "blood") if x)
        m.tags = tags
        snr = rng.uniform(*cfg.snr_db, size=m.n_points)
        for j, d in enumerate(decays):
            for bi, band in enumerate(manifest.bands):
                clean = np.convolve(irf, d.impulse_response(bi, t))[: cfg.n_samples]
                sd = clean.max() / 10.0 ** (snr[j] / 20.0)
                waves[band][m.first_point + j] = clean * d.signal_scale + sd * rng.standard_normal(cfg.n_samples)
    return manifest, waves


def inject_label_noise(manifest: DatasetManifest, rate: float, mode: str = "adjacent",
                       seed: int = 0) -> tuple[DatasetManifest, CorruptionLog]:
    """Flip exactly ``round(rate * n_margins)`` margin labels; returns a new manifest and the log."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"rate must lie in [0, 1), got {rate}")
    if mode not in ("adjacent", "uniform"):
        raise ParameterError(f"unknown corruption mode {mode!r}")
    C = manifest.n_classes
    if C < 2:
        raise ParameterError("cannot corrupt labels with a single class")
    out = manifest.copy()
    already = out.corruption_log.margin_ids()
    candidates = [i for i, m in enumerate(out.margins) if m.margin_id not in already]
    n_flip = int(np.floor(rate * len(out.margins) + 0.5))
    if n_flip > len(candidates):
        raise ParameterError("not enough uncorrupted margins left")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(candidates), size=n_flip, replace=False).tolist())
    entries = []
    for ci in chosen:
        m = out.margins[candidates[ci]]
        old = m.label
        if mode == "adjacent":
            if old == 0:
                new = 1
            elif old == C - 1:
                new = C - 2
            else:
                new = old + int(rng.choice([-1, 1]))
        else:
            others = [c for c in range(C) if c != old]
            new = int(rng.choice(others))
        m.label = new
        entries.append(CorruptionEntry(m.margin_id, old, new))
    log = CorruptionLog(entries)
    out.corruption_log = CorruptionLog(out.corruption_log.entries + entries)
    return out, log


def restore_labels(manifest: DatasetManifest, log: CorruptionLog) -> DatasetManifest:
    """Undo a corruption log (entries applied in reverse order)."""
    out = manifest.copy()
    index = {m.margin_id: m for m in out.margins}
    undone = set()
    for e in reversed(log.entries):
        m = index[e.margin_id]
        if m.label != e.corrupted_label:
            raise InputError(f"margin {e.margin_id} no longer carries the logged corrupted label")
        m.label = e.true_label
        undone.add(e.margin_id)
    out.corruption_log = CorruptionLog([e for e in out.corruption_log.entries if e.margin_id not in undone])
    return out
