"""Throughput-versus-SM-share curves for the three execution phases.

Every rate in the simulator comes from a :class:`ProfileBundle`. Curves are
tables sampled on the slot grid ``{g, 2g, ..., S}``; there is no interpolation
between grid points because the executor only ever binds whole slots.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import yaml

from .docsource import SourceMap, parse_document, read_document
from .errors import DomainError, ValidationError

DECODE = "decode"
COLD = "cold_prefill"
RESUME = "resume_prefill"
PHASES = (DECODE, COLD, RESUME)

PROFILE_SCHEMA = "agentsim.profile/1"


@dataclass(frozen=True)
class PhaseProfile:
    phase: str
    points: tuple  # ((sm_count, tokens_per_second), ...) ascending in sm_count
    total_sms: int

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((int(s), float(r)) for s, r in self.points))
        object.__setattr__(self, "_table", dict(self.points))

    @property
    def sms(self):
        return tuple(s for s, _ in self.points)

    @property
    def rates(self):
        return tuple(r for _, r in self.points)

    @property
    def max_rate(self):
        return self.points[-1][1]


@dataclass(frozen=True)
class ProfileBundle:
    decode: PhaseProfile
    cold: PhaseProfile
    resume: PhaseProfile
    granularity: int

    @property
    def total_sms(self) -> int:
        return self.decode.total_sms

    @property
    def total_slots(self) -> int:
        return self.total_sms // self.granularity

    @property
    def grid(self) -> tuple:
        return tuple(range(self.granularity, self.total_sms + 1, self.granularity))

    def phase(self, name: str) -> PhaseProfile:
        return {DECODE: self.decode, COLD: self.cold, RESUME: self.resume}[name]


def lookup(profile: PhaseProfile, sms: int) -> float:
    """Rate recorded at grid point ``sms`` (tokens/s)."""
    try:
        return profile._table[sms]
    except (KeyError, TypeError):
        raise DomainError(
            f"{profile.phase}: {sms} SMs is not a grid point of the profile {profile.sms}"
        ) from None


def rate_at(profile: PhaseProfile, sms: int) -> float:
    """Like :func:`lookup`, but an empty partition (0 SMs) has rate 0."""
    if sms == 0:
        return 0.0
    return lookup(profile, sms)


def mixed_prefill_rate(bundle: ProfileBundle, eta: float, sms: int) -> float:
    """Effective prefill rate ``eta * mu_C + (1 - eta) * mu_R`` on ``sms`` SMs.

    ``sms == 0`` is accepted and yields 0: a prefill partition with no SMs
    delivers no service.
    """
    if not 0.0 <= eta <= 1.0 or math.isnan(eta):
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    if sms == 0:
        return 0.0
    _check_grid(bundle, sms)
    if eta == 1.0:
        return lookup(bundle.cold, sms)
    if eta == 0.0:
        return lookup(bundle.resume, sms)
    return eta * lookup(bundle.cold, sms) + (1.0 - eta) * lookup(bundle.resume, sms)


def _check_grid(bundle: ProfileBundle, sms: int):
    g = bundle.granularity
    if not isinstance(sms, int) or sms < g or sms > bundle.total_sms or sms % g:
        raise DomainError(f"{sms} SMs is off the grid {{{g}, {2 * g}, ..., {bundle.total_sms}}}")


def lipschitz_estimate(bundle: ProfileBundle, eta: float, lo: int, hi: int) -> float:
    """Largest slope of the mixed prefill curve between adjacent grid points in [lo, hi].

    ``lo`` may be 0 (the empty partition, rate 0).
    """
    g = bundle.granularity
    for x in (lo, hi):
        if x != 0:
            _check_grid(bundle, x)
    if not lo < hi:
        raise DomainError(f"empty Lipschitz window [{lo}, {hi}]")
    slope = 0.0
    for x in range(lo, hi, g):
        step = abs(mixed_prefill_rate(bundle, eta, x + g) - mixed_prefill_rate(bundle, eta, x)) / g
        slope = max(slope, step)
    return slope


def saturation_fractions(bundle: ProfileBundle, share: float = 0.5):
    """Fraction of max rate reached by decode and cold prefill at ``share`` of the SMs.

    Uses the largest grid point not above ``share * S``.
    """
    g = bundle.granularity
    sms = int(share * bundle.total_sms) // g * g
    if sms < g:
        raise DomainError(f"share {share} is below one slot")
    return (
        lookup(bundle.decode, sms) / bundle.decode.max_rate,
        lookup(bundle.cold, sms) / bundle.cold.max_rate,
    )


# -- documents ---------------------------------------------------------------

def bundle_from_data(data, src: SourceMap | None = None) -> ProfileBundle:
    src = src or SourceMap("<profile>")
    if not isinstance(data, dict):
        raise ValidationError("profile document must be a mapping", src.where())
    for key in ("total_sms", "granularity", "phases"):
        if key not in data:
            raise ValidationError(f"missing required field '{key}'", src.where())
    schema = data.get("schema", PROFILE_SCHEMA)
    if schema != PROFILE_SCHEMA:
        raise ValidationError(f"unsupported schema '{schema}' (expected {PROFILE_SCHEMA})", src.where("schema"))
    total, g = data["total_sms"], data["granularity"]
    if not isinstance(total, int) or isinstance(total, bool) or total <= 0:
        raise ValidationError("total_sms must be a positive integer", src.where("total_sms"))
    if not isinstance(g, int) or isinstance(g, bool) or g <= 0 or total % g:
        raise ValidationError(
            f"granularity must be a positive integer dividing total_sms={total}", src.where("granularity")
        )
    phases = data["phases"]
    if not isinstance(phases, dict):
        raise ValidationError("'phases' must be a mapping", src.where("phases"))
    unknown = set(phases) - set(PHASES)
    if unknown:
        raise ValidationError(f"unknown phase(s) {sorted(unknown)}", src.where("phases"))
    grid = list(range(g, total + 1, g))
    profiles = {}
    for name in PHASES:
        if name not in phases:
            raise ValidationError(f"missing phase '{name}'", src.where("phases"))
        rows = phases[name]
        if not isinstance(rows, list) or not rows:
            raise ValidationError(f"phase '{name}' must be a non-empty list", src.where("phases", name))
        points = []
        for i, row in enumerate(rows):
            where = src.where("phases", name, i)
            if not isinstance(row, dict) or set(row) != {"sms", "tokens_per_second"}:
                raise ValidationError("each point needs exactly 'sms' and 'tokens_per_second'", where)
            sms, rate = row["sms"], row["tokens_per_second"]
            if not isinstance(sms, int) or isinstance(sms, bool):
                raise ValidationError(f"sms must be an integer, got {sms!r}", where)
            if not isinstance(rate, (int, float)) or isinstance(rate, bool) or not math.isfinite(rate) or rate <= 0:
                raise ValidationError(f"{name} rate at sms={sms} must be a positive number, got {rate!r}", where)
            if points and sms <= points[-1][0]:
                raise ValidationError(f"{name}: sm counts must be strictly increasing (sms={sms})", where)
            if points and rate < points[-1][1]:
                raise ValidationError(
                    f"{name}: rate decreases at sms={sms} ({points[-1][1]} -> {rate}); "
                    "throughput must be non-decreasing in SMs",
                    where,
                )
            points.append((sms, float(rate)))
        got = [s for s, _ in points]
        if got != grid:
            raise ValidationError(
                f"{name}: points must be sampled exactly on the grid {grid}, got {got}", src.where("phases", name)
            )
        profiles[name] = PhaseProfile(name, tuple(points), total)
    return ProfileBundle(profiles[DECODE], profiles[COLD], profiles[RESUME], g)


def bundle_to_data(bundle: ProfileBundle) -> dict:
    return {
        "schema": PROFILE_SCHEMA,
        "total_sms": bundle.total_sms,
        "granularity": bundle.granularity,
        "phases": {
            name: [{"sms": s, "tokens_per_second": r} for s, r in bundle.phase(name).points]
            for name in PHASES
        },
    }


def load_profiles(source) -> ProfileBundle:
    """Load a profile document from a path, a YAML/JSON string, or parsed data."""
    if isinstance(source, dict):
        return bundle_from_data(source)
    text = str(source)
    if "\n" in text or text.lstrip().startswith("{"):
        return bundle_from_data(*parse_document(text))
    return bundle_from_data(*read_document(text))


def dump_profiles(bundle: ProfileBundle) -> str:
    return yaml.safe_dump(bundle_to_data(bundle), sort_keys=False)


# -- synthetic shapes ----------------------------------------------------------

@dataclass(frozen=True)
class CurveShape:
    max_rate: float  # tokens/s at the full GPU
    knee: float  # saturation scale as a fraction of SMs; smaller saturates earlier


DEFAULT_TOTAL_SMS = 120
DEFAULT_GRANULARITY = 12
DEFAULT_SHAPES = {
    DECODE: CurveShape(max_rate=120.0, knee=0.15),
    COLD: CurveShape(max_rate=3000.0, knee=0.8),
    # short resume prefills expose little parallelism and saturate early
    RESUME: CurveShape(max_rate=800.0, knee=0.15),
}


def shape_rate(shape: CurveShape, share: float) -> float:
    """Saturating curve normalised so that ``share=1`` gives ``max_rate``."""
    return shape.max_rate * (-math.expm1(-share / shape.knee)) / (-math.expm1(-1.0 / shape.knee))


def generate_bundle(
    shapes: dict | None = None,
    total_sms: int = DEFAULT_TOTAL_SMS,
    granularity: int = DEFAULT_GRANULARITY,
    digits: int = 3,
) -> ProfileBundle:
    """Build a bundle from saturating curve shapes.

    Warns when the decode knee is not earlier than the cold-prefill knee, since
    decode is expected to saturate first.
    """
    shapes = {**DEFAULT_SHAPES, **(shapes or {})}
    for name, shape in shapes.items():
        if not (shape.max_rate > 0 and math.isfinite(shape.max_rate)):
            raise ValidationError(f"{name}: max_rate must be positive, got {shape.max_rate}")
        if not (shape.knee > 0 and math.isfinite(shape.knee)):
            raise ValidationError(f"{name}: knee must be positive (a non-positive knee is not a monotone curve)")
    if shapes[DECODE].knee >= shapes[COLD].knee:
        warnings.warn(
            f"decode knee {shapes[DECODE].knee} is not earlier than cold-prefill knee "
            f"{shapes[COLD].knee}; decode is expected to saturate before prefill",
            stacklevel=2,
        )
    if total_sms <= 0 or granularity <= 0 or total_sms % granularity:
        raise ValidationError("granularity must divide total_sms")
    data = {
        "total_sms": total_sms,
        "granularity": granularity,
        "phases": {
            name: [
                {"sms": sms, "tokens_per_second": round(shape_rate(shapes[name], sms / total_sms), digits)}
                for sms in range(granularity, total_sms + 1, granularity)
            ]
            for name in PHASES
        },
    }
    return bundle_from_data(data)


def default_bundle() -> ProfileBundle:
    return generate_bundle()
