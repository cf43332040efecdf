"""Run-config document: one YAML/JSON file with a section per module.

Example::

    schema: agentsim.run/1
    seed: 7
    policy: agentserve
    profile: default            # or a path, or an inline profile mapping
    workload: {paradigm: ReAct, concurrency: 6}
    slo: {calibration_factor: 6}
    controller: {delta_t: 250}
    executor: {rebind_overhead_ms: 0.05}

Every field not given is derived from the profile and SLO (see ``from_data``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .docsource import SourceMap, parse_document, read_document
from .errors import ValidationError
from .profiles import ProfileBundle, bundle_from_data, bundle_to_data, default_bundle, load_profiles
from .scheduler import ControllerConfig, get_policy
from .slo import SLOConfig, calibrate_slo, isolated_tpot_ms, r_g_star_slots
from .workload import ParadigmSpec, ToolDelay, TokenDistribution, paradigm

RUN_SCHEMA = "agentsim.run/1"
DEFAULT_SLO_FACTOR = 6.0
DEFAULT_SWEEP = (3, 4, 5, 6)


@dataclass(frozen=True)
class WorkloadConfig:
    paradigm: str = "ReAct"
    model: str = "qwen2.5-7b"
    concurrency: int = 3
    stagger_ms: tuple = (0.0, 500.0)
    steps_per_session: int | None = None
    tool_delay: ToolDelay = ToolDelay()
    cold: TokenDistribution | None = None
    resume: TokenDistribution | None = None
    decode: TokenDistribution | None = None

    def spec(self) -> ParadigmSpec:
        over = {"tool_delay": self.tool_delay}
        for name in ("cold", "resume", "decode", "steps_per_session"):
            if getattr(self, name) is not None:
                over[name] = getattr(self, name)
        return paradigm(self.paradigm, self.model, **over)


@dataclass(frozen=True)
class ExecutorConfig:
    total_slots: int = 10
    rebind_overhead_ms: float = 0.05
    resume_chunk_tokens: int = 64
    prefill_chunk_tokens: int = 256  # chunked_prefill baseline
    timeslice_ms: float = 50.0  # no_green baseline: prefill slice between decode steps
    static_decode_slots: int | None = None  # fixed-split policies; default = controller.initial_R
    ipc_overhead_ms: float = 2.0  # process_pd: per-prefill cross-process hand-off


@dataclass(frozen=True)
class RunConfig:
    bundle: ProfileBundle
    workload: WorkloadConfig
    controller: ControllerConfig
    executor: ExecutorConfig
    slo: SLOConfig
    policy: str = "agentserve"
    horizon: float | None = None  # ms; None runs until every session is done
    seed: int = 0
    output_dir: str = "out"
    sweep: tuple = DEFAULT_SWEEP
    policies: tuple = ("agentserve", "mixed_fcfs", "chunked_prefill", "process_pd")

    @property
    def total_slots(self) -> int:
        return self.executor.total_slots

    @property
    def static_decode_slots(self) -> int:
        s = self.executor.static_decode_slots
        return self.controller.initial_R if s is None else s

    def with_(self, **kw) -> "RunConfig":
        wl = kw.pop("workload", None)
        cfg = replace(self, **kw)
        if wl:
            cfg = replace(cfg, workload=replace(cfg.workload, **wl))
        return cfg

    def to_data(self) -> dict:
        """Serializable form; ``from_data(to_data(c)) == c``."""
        wl = asdict(self.workload)
        wl["stagger_ms"] = list(self.workload.stagger_ms)
        return {
            "schema": RUN_SCHEMA,
            "seed": self.seed,
            "policy": self.policy,
            "horizon": self.horizon,
            "output_dir": self.output_dir,
            "sweep": list(self.sweep),
            "policies": list(self.policies),
            "profile": bundle_to_data(self.bundle),
            "workload": wl,
            "slo": asdict(self.slo),
            "controller": asdict(self.controller),
            "executor": asdict(self.executor),
        }


def default_controller(bundle: ProfileBundle, slo: SLOConfig, total_slots: int, **over) -> ControllerConfig:
    """Controller constants anchored to the SLO.

    R_base = initial_R = the smallest decode reservation meeting the SLO's
    decode rate. Thresholds bracket the TPOT target: protect above
    ``0.8 * tau_tpot``, relax below ``0.4 * tau_tpot``.
    """
    r_star = r_g_star_slots(bundle, slo)
    base = dict(
        theta_low=0.4 * slo.tau_tpot,
        theta_high=0.8 * slo.tau_tpot,
        delta_R=1,
        delta_B=64,
        delta_t=250.0,
        B_min=64,
        B_max=1024,
        R_base=r_star,
        initial_B=256,
        initial_R=r_star,
        R_max=max(r_star, total_slots - 1),
    )
    base.update(over)
    return ControllerConfig(**base)


def default_config(**kw) -> RunConfig:
    """Shipped defaults: default profile, ReAct, calibrated SLO."""
    return from_data({"schema": RUN_SCHEMA, **kw})


# -- parsing -------------------------------------------------------------------

def _check_keys(section: dict, allowed, src: SourceMap, *path):
    if not isinstance(section, dict):
        raise ValidationError("section must be a mapping", src.where(*path))
    for key in section:
        if key not in allowed:
            raise ValidationError(f"unknown field '{key}' (allowed: {sorted(allowed)})", src.where(*path, key))


def _num(value, src, *path, integer=False, positive=False, nonneg=False, allow_none=False):
    if value is None and allow_none:
        return None
    ok = isinstance(value, int) if integer else isinstance(value, (int, float))
    if not ok or isinstance(value, bool):
        raise ValidationError(f"expected {'an integer' if integer else 'a number'}, got {value!r}", src.where(*path))
    if positive and not value > 0:
        raise ValidationError(f"must be positive, got {value}", src.where(*path))
    if nonneg and value < 0:
        raise ValidationError(f"must be non-negative, got {value}", src.where(*path))
    return value if integer else float(value)


def _dist(data, src, *path):
    _check_keys(data, {"min_tokens", "max_tokens", "mean_tokens"}, src, *path)
    try:
        return TokenDistribution(
            _num(data["min_tokens"], src, *path, "min_tokens", integer=True),
            _num(data["max_tokens"], src, *path, "max_tokens", integer=True),
            _num(data["mean_tokens"], src, *path, "mean_tokens"),
        )
    except KeyError as exc:
        raise ValidationError(f"missing field {exc}", src.where(*path)) from None
    except ValidationError as exc:
        if exc.location is None:
            raise ValidationError(str(exc), src.where(*path)) from None
        raise


def _profile(data, src: SourceMap, base_dir: Path | None):
    spec = data.get("profile", "default")
    if spec == "default" or spec is None:
        return default_bundle()
    if isinstance(spec, dict):
        return bundle_from_data(spec, src.sub("profile"))
    if isinstance(spec, str):
        path = Path(spec)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return load_profiles(str(path))
    raise ValidationError("profile must be 'default', a path, or a mapping", src.where("profile"))


def from_data(data, src: SourceMap | None = None, base_dir: Path | None = None) -> RunConfig:
    src = src or SourceMap("<config>")
    top = {"schema", "seed", "policy", "horizon", "output_dir", "sweep", "policies",
           "profile", "workload", "slo", "controller", "executor"}
    _check_keys(data, top, src)
    schema = data.get("schema", RUN_SCHEMA)
    if schema != RUN_SCHEMA:
        raise ValidationError(f"unsupported schema '{schema}' (expected {RUN_SCHEMA})", src.where("schema"))

    bundle = _profile(data, src, base_dir)

    # workload
    wd = data.get("workload") or {}
    wfields = {f.name for f in fields(WorkloadConfig)}
    _check_keys(wd, wfields, src, "workload")
    wkw = {}
    for key in ("paradigm", "model"):
        if key in wd:
            wkw[key] = str(wd[key])
    if "concurrency" in wd:
        wkw["concurrency"] = _num(wd["concurrency"], src, "workload", "concurrency", integer=True, positive=True)
    if "steps_per_session" in wd:
        wkw["steps_per_session"] = _num(wd["steps_per_session"], src, "workload", "steps_per_session",
                                        integer=True, positive=True, allow_none=True)
    if "stagger_ms" in wd:
        st = wd["stagger_ms"]
        if isinstance(st, (int, float)) and not isinstance(st, bool):
            st = [0.0, st]
        if not isinstance(st, list) or len(st) != 2:
            raise ValidationError("stagger_ms must be [low, high] or a single upper bound", src.where("workload", "stagger_ms"))
        lo = _num(st[0], src, "workload", "stagger_ms", nonneg=True)
        hi = _num(st[1], src, "workload", "stagger_ms", nonneg=True)
        if hi < lo:
            raise ValidationError("stagger_ms needs low <= high", src.where("workload", "stagger_ms"))
        wkw["stagger_ms"] = (lo, hi)
    if "tool_delay" in wd:
        td = wd["tool_delay"]
        if isinstance(td, (int, float)) and not isinstance(td, bool):
            td = {"kind": "fixed", "ms": td}
        _check_keys(td, {"kind", "ms", "low", "high"}, src, "workload", "tool_delay")
        try:
            wkw["tool_delay"] = ToolDelay(**{k: (float(v) if k != "kind" else v) for k, v in td.items()})
        except ValidationError as exc:
            raise ValidationError(str(exc), src.where("workload", "tool_delay")) from None
    for key in ("cold", "resume", "decode"):
        if wd.get(key) is not None:
            wkw[key] = _dist(wd[key], src, "workload", key)
    workload = WorkloadConfig(**wkw)
    try:
        workload.spec()
    except ValidationError as exc:
        raise ValidationError(str(exc), src.where("workload")) from None

    # slo
    sd = data.get("slo") or {}
    _check_keys(sd, {"tau_ttft", "tau_tpot", "calibration_factor", "tpot_statistic"}, src, "slo")
    factor = _num(sd.get("calibration_factor", DEFAULT_SLO_FACTOR), src, "slo", "calibration_factor", positive=True)
    if factor < 1:
        raise ValidationError("calibration_factor must be >= 1", src.where("slo", "calibration_factor"))
    stat = sd.get("tpot_statistic", "p95")
    mean_cold = workload.spec().cold.mean_tokens
    slo = calibrate_slo(bundle, factor, mean_cold, tpot_statistic=stat)
    if "tau_ttft" in sd or "tau_tpot" in sd:
        slo = SLOConfig(
            tau_ttft=_num(sd.get("tau_ttft", slo.tau_ttft), src, "slo", "tau_ttft", positive=True),
            tau_tpot=_num(sd.get("tau_tpot", slo.tau_tpot), src, "slo", "tau_tpot", positive=True),
            calibration_factor=factor,
            tpot_statistic=stat,
        )

    # executor
    ed = data.get("executor") or {}
    _check_keys(ed, {f.name for f in fields(ExecutorConfig)}, src, "executor")
    ekw = {}
    for f in fields(ExecutorConfig):
        if f.name in ed:
            integer = f.name in ("total_slots", "resume_chunk_tokens", "prefill_chunk_tokens", "static_decode_slots")
            ekw[f.name] = _num(ed[f.name], src, "executor", f.name, integer=integer,
                               positive=f.name != "rebind_overhead_ms" and f.name != "ipc_overhead_ms",
                               nonneg=True, allow_none=f.name == "static_decode_slots")
    executor = ExecutorConfig(**ekw)
    if executor.total_slots != bundle.total_slots:
        raise ValidationError(
            f"executor.total_slots={executor.total_slots} does not match the profile grid "
            f"(total_sms/granularity = {bundle.total_slots})",
            src.where("executor", "total_slots") if "total_slots" in ed else src.where("profile"),
        )

    # controller
    cd = data.get("controller") or {}
    cfields = {f.name for f in fields(ControllerConfig)}
    _check_keys(cd, cfields, src, "controller")
    ckw = {}
    for name in cfields:
        if name in cd:
            integer = name not in ("theta_low", "theta_high", "delta_t")
            ckw[name] = _num(cd[name], src, "controller", name, integer=integer, nonneg=True,
                             allow_none=name == "R_max")
    try:
        controller = default_controller(bundle, slo, executor.total_slots, **ckw)
        controller.validate(executor.total_slots)
    except ValidationError as exc:
        loc = exc.location.split(".", 1)[-1] if exc.location else None
        raise ValidationError(str(exc).split(": ", 1)[-1], src.where("controller", loc) if loc else src.where("controller")) from None
    if executor.static_decode_slots is not None and not 1 <= executor.static_decode_slots <= executor.total_slots:
        raise ValidationError("static_decode_slots outside the slot menu", src.where("executor", "static_decode_slots"))

    policy = str(data.get("policy", "agentserve"))
    try:
        get_policy(policy)
    except ValidationError as exc:
        raise ValidationError(str(exc).split(": ", 1)[-1], src.where("policy")) from None
    policies = data.get("policies", list(RunConfig.policies))
    if not isinstance(policies, list):
        raise ValidationError("policies must be a list", src.where("policies"))
    for i, p in enumerate(policies):
        try:
            get_policy(p)
        except ValidationError as exc:
            raise ValidationError(str(exc).split(": ", 1)[-1], src.where("policies", i)) from None
    sweep = data.get("sweep", list(DEFAULT_SWEEP))
    if isinstance(sweep, str):
        sweep = parse_sweep(sweep)
    if not isinstance(sweep, list) or not sweep:
        raise ValidationError("sweep must be a non-empty list of concurrencies", src.where("sweep"))
    sweep = tuple(_num(v, src, "sweep", i, integer=True, positive=True) for i, v in enumerate(sweep))

    return RunConfig(
        bundle=bundle,
        workload=workload,
        controller=controller,
        executor=executor,
        slo=slo,
        policy=policy,
        horizon=_num(data.get("horizon"), src, "horizon", positive=True, allow_none=True),
        seed=_num(data.get("seed", 0), src, "seed", integer=True, nonneg=True),
        output_dir=str(data.get("output_dir", "out")),
        sweep=sweep,
        policies=tuple(policies),
    )


def parse_sweep(text: str) -> list:
    """``"3-6"`` -> [3, 4, 5, 6]; ``"3,5"`` -> [3, 5]."""
    text = str(text).replace("–", "-").strip()
    try:
        if "-" in text:
            lo, hi = (int(x) for x in text.split("-", 1))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"bad sweep '{text}' (use e.g. 3-6 or 3,4,6)", "sweep") from None


def load_config(path) -> RunConfig:
    data, src = read_document(path)
    return from_data(data, src, Path(path).parent)


def loads_config(text: str, name: str = "<config>") -> RunConfig:
    data, src = parse_document(text, name)
    return from_data(data, src)
