"""Run configuration: an INI file with human units (MHz, μs) converted to SI.

    [params]    g, kappa, gamma_perp, delta_atom, delta_cavity (rate/2π, MHz); N; eta
    [sim]       t_end, record_interval, dark_lifetime, settle_time (μs); n_max; safety; n_traj
    [detector]  preset, or sample_rate (MS/s), filter_kind, band_low, band_high (MHz),
                filter_order, oversample
    [run]       experiment, output_dir, workers, seed
    [sweep]     N_values, bands, n_bootstrap
    [hmm]       n_trials, noise_scale, switch_rate (MHz, as rate/2π)
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError, CqedError
from .model import TWO_PI, SystemParams, truncation_heuristic
from .photocurrent import PRESETS, DetectorConfig, preset
from .trajectory import SimConfig

EXPERIMENTS = ("steady", "trajectory", "ensemble", "fig1b", "fig2", "fig3", "fig4", "hmm-eval")
DEFAULT_SWEEP_N = (1, 2, 4, 8, 14, 20, 30, 42, 56)
DEFAULT_SWEEP_BANDS = ("lp10", "lp2")
# per-experiment defaults used when the file does not set them
EXPERIMENT_DEFAULTS = {
    "steady": {"N": 20.0, "preset": "lp10", "t_end": 2.0, "n_traj": 1},
    "trajectory": {"N": 20.0, "preset": "lp10", "t_end": 2.0, "n_traj": 1},
    "ensemble": {"N": 4.0, "preset": "lp10", "t_end": 0.5, "n_traj": 100},
    "fig1b": {"N": 20.0, "preset": "bp0.1-8", "t_end": 5.0, "n_traj": 20},
    "fig2": {"N": 20.0, "preset": "lp10", "t_end": 5.0, "n_traj": 20},
    "fig3": {"N": 20.0, "preset": "lp10", "t_end": 10.0, "n_traj": 10},
    "fig4": {"N": 37.0, "preset": "lp10", "t_end": 10.0, "n_traj": 20, "dark_lifetime": 8.0},
    "hmm-eval": {"N": 37.0, "preset": "lp10", "t_end": 5.0, "n_traj": 50, "dark_lifetime": 4.0},
}

KNOWN_KEYS = {
    "params": {"g", "kappa", "gamma_perp", "delta_atom", "delta_cavity", "n", "eta"},
    "sim": {"t_end", "record_interval", "dark_lifetime", "settle_time", "n_max", "safety", "n_traj"},
    "detector": {"preset", "sample_rate", "filter_kind", "band_low", "band_high", "filter_order",
                 "oversample"},
    "run": {"experiment", "output_dir", "workers", "seed"},
    "sweep": {"n_values", "bands", "n_bootstrap"},
    "hmm": {"n_trials", "noise_scale", "switch_rate"},
}


@dataclass
class SimSettings:
    t_end: float
    record_interval: float = 2.5e-9
    dark_lifetime: float | None = None
    settle_time: float | None = None
    n_max: int | None = None
    safety: float = 20.0
    n_traj: int = 1

    def sim_config(self, params: SystemParams, seed: int) -> SimConfig:
        n_max = self.n_max if self.n_max is not None else truncation_heuristic(params.N)
        return SimConfig.for_params(params, self.t_end, record_interval=self.record_interval,
                                    n_max=n_max, seed=seed, dark_lifetime=self.dark_lifetime,
                                    settle_time=self.settle_time, safety=self.safety)


@dataclass
class RunConfig:
    params: SystemParams
    sim: SimSettings
    detector: DetectorConfig
    experiment: str
    output_dir: Path = Path("out")
    workers: int = 1
    seed: int = 0
    detector_name: str | None = None
    sweep_N: tuple = DEFAULT_SWEEP_N
    sweep_bands: tuple = DEFAULT_SWEEP_BANDS
    n_bootstrap: int = 200
    hmm_trials: int = 50
    noise_scale: float = 1.0
    hmm_switch_rate: float | None = None
    raw: dict = field(default_factory=dict)

    def hash(self) -> str:
        """Digest of everything that can change results (not workers or output_dir)."""
        doc = {
            "experiment": self.experiment,
            "seed": self.seed,
            "params": asdict(self.params),
            "sim": asdict(self.sim),
            "detector": asdict(self.detector),
            "sweep_N": list(self.sweep_N),
            "sweep_bands": list(self.sweep_bands),
            "n_bootstrap": self.n_bootstrap,
            "hmm_trials": self.hmm_trials,
            "noise_scale": self.noise_scale,
            "hmm_switch_rate": self.hmm_switch_rate,
        }
        text = json.dumps(doc, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()


_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number."""
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION.match(line)
        if m:
            section = m.group(1).strip().lower()
            where[(section, None)] = no
            continue
        m = _KEY.match(line)
        if m and section is not None:
            where[(section, m.group(1).strip().lower())] = no
    return where


class _Reader:
    def __init__(self, parser, lines):
        self.parser = parser
        self.lines = lines

    def line(self, section, key=None):
        return self.lines.get((section, key))

    def get(self, section, key, conv, default=None):
        if not self.parser.has_option(section, key):
            return default
        raw = self.parser.get(section, key).strip()
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}", self.line(section, key)) from None


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _int(s: str) -> int:
    return int(s)


def _list(conv):
    def parse(s):
        items = [p.strip() for p in s.split(",") if p.strip()]
        if not items:
            raise ValueError("empty list")
        return tuple(conv(p) for p in items)
    return parse


def parse_config(text: str = "", *, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from INI text plus command-line overrides
    (``experiment``, ``seed``, ``workers``, ``output_dir``, ``N``)."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("unparseable line", lineno) from None
    lines = _line_index(text)
    rd = _Reader(parser, lines)

    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise ConfigError(f"unknown section [{section}]; valid: {', '.join(KNOWN_KEYS)}",
                              rd.line(section.lower()))
        for key in parser.options(section):
            if key not in KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", rd.line(section, key))

    experiment = overrides.get("experiment") or rd.get("run", "experiment", str)
    if experiment is None:
        raise ConfigError("no experiment given (use [run] experiment or --experiment)")
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; valid: {', '.join(EXPERIMENTS)}",
                          rd.line("run", "experiment"))
    dflt = EXPERIMENT_DEFAULTS[experiment]

    def us(v):
        return None if v is None else v * 1e-6

    try:
        N = overrides.get("N", rd.get("params", "n", _float, dflt["N"]))
        params = SystemParams.from_mhz(
            g=rd.get("params", "g", _float, 16.0),
            kappa=rd.get("params", "kappa", _float, 8.0),
            gamma_perp=rd.get("params", "gamma_perp", _float, 2.6),
            delta_atom=rd.get("params", "delta_atom", _float, 0.0),
            delta_cavity=rd.get("params", "delta_cavity", _float, 0.0),
            N=N, eta=rd.get("params", "eta", _float, 1.0))
    except ConfigError:
        raise
    except CqedError as exc:
        raise ConfigError(str(exc), rd.line("params")) from None

    sim = SimSettings(
        t_end=us(rd.get("sim", "t_end", _float, dflt["t_end"])),
        record_interval=us(rd.get("sim", "record_interval", _float, 0.0025)),
        dark_lifetime=us(rd.get("sim", "dark_lifetime", _float, dflt.get("dark_lifetime"))),
        settle_time=us(rd.get("sim", "settle_time", _float)),
        n_max=rd.get("sim", "n_max", _int),
        safety=rd.get("sim", "safety", _float, 20.0),
        n_traj=rd.get("sim", "n_traj", _int, dflt["n_traj"]))
    for key, val, ok in (("t_end", sim.t_end, sim.t_end > 0),
                         ("record_interval", sim.record_interval, sim.record_interval > 0),
                         ("n_traj", sim.n_traj, sim.n_traj >= 1),
                         ("safety", sim.safety, sim.safety > 0),
                         ("n_max", sim.n_max, sim.n_max is None or sim.n_max >= 1),
                         ("dark_lifetime", sim.dark_lifetime,
                          sim.dark_lifetime is None or sim.dark_lifetime > 0)):
        if not ok:
            raise ConfigError(f"[sim] {key} = {val!r} out of range", rd.line("sim", key))

    name = rd.get("detector", "preset", str)
    explicit = {k for k in KNOWN_KEYS["detector"] - {"preset"} if parser.has_option("detector", k)}
    try:
        if name is not None and name not in PRESETS:
            raise ConfigError(f"unknown detector preset {name!r}; valid presets: {', '.join(PRESETS)}",
                              rd.line("detector", "preset"))
        if name is None and not explicit:
            name = dflt["preset"]
        base = preset(name) if name is not None else DetectorConfig()
        changes = {"eta": params.eta}
        for key, conv, scale in (("sample_rate", _float, 1e6), ("band_low", _float, 1e6),
                                 ("band_high", _float, 1e6), ("filter_kind", str, None),
                                 ("filter_order", _int, None), ("oversample", _int, None)):
            v = rd.get("detector", key, conv)
            if v is not None:
                changes[key] = v * scale if scale else v
        detector = DetectorConfig(**{**asdict(base), **changes})
    except ConfigError:
        raise
    except CqedError as exc:
        raise ConfigError(str(exc), rd.line("detector")) from None

    workers = overrides.get("workers", rd.get("run", "workers", _int, 1))
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}", rd.line("run", "workers"))
    seed = overrides.get("seed", rd.get("run", "seed", _int, 0))
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}", rd.line("run", "seed"))
    output_dir = Path(overrides.get("output_dir", rd.get("run", "output_dir", str, "out")))

    sweep_N = rd.get("sweep", "n_values", _list(_float), DEFAULT_SWEEP_N)
    bands = rd.get("sweep", "bands", _list(str), DEFAULT_SWEEP_BANDS)
    for b in bands:
        if b not in PRESETS:
            raise ConfigError(f"unknown detector preset {b!r}; valid presets: {', '.join(PRESETS)}",
                              rd.line("sweep", "bands"))
    switch = rd.get("hmm", "switch_rate", _float)
    cfg = RunConfig(
        params=params, sim=sim, detector=detector, experiment=experiment, output_dir=output_dir,
        workers=workers, seed=seed, detector_name=name if not explicit else None,
        sweep_N=sweep_N, sweep_bands=bands, n_bootstrap=rd.get("sweep", "n_bootstrap", _int, 200),
        hmm_trials=rd.get("hmm", "n_trials", _int, 50),
        noise_scale=rd.get("hmm", "noise_scale", _float, 1.0),
        hmm_switch_rate=None if switch is None else TWO_PI * 1e6 * switch,
        raw={s: dict(parser.items(s)) for s in parser.sections()})
    if cfg.hmm_trials < 50:
        raise ConfigError("[hmm] n_trials must be >= 50", rd.line("hmm", "n_trials"))
    if not cfg.noise_scale > 0:
        raise ConfigError("[hmm] noise_scale must be > 0", rd.line("hmm", "noise_scale"))
    return cfg


def load_config(path, **overrides) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides=overrides)


def diagnostics(cfg: RunConfig) -> list[tuple[str, str]]:
    """(level, message) pairs: derived quantities as 'info', problems as
    'warning' or 'error'.  Never raises for a parsed config."""
    p = cfg.params
    out = [
        ("info", f"E = {p.drive_E:.4e} rad/s (N = {p.N:g})"),
        ("info", f"C = g^2/(2 kappa gamma_perp) = {p.cooperativity:.3f}"),
        ("info", f"2/gamma_perp = {2 / p.gamma_perp * 1e6:.4f} us"),
        ("info", f"g/kappa = {p.g / p.kappa:.3f} (branch separation in Y units)"),
    ]
    need = truncation_heuristic(p.N)
    n_max = cfg.sim.n_max if cfg.sim.n_max is not None else need
    if n_max < need:
        out.append(("warning", f"n_max = {n_max} is below the truncation heuristic "
                               f"N + 8 sqrt(N) + 10 = {need} for N = {p.N:g}"))
    try:
        sim = cfg.sim.sim_config(p, cfg.seed)
        sim.check(p)
        out.append(("info", f"dt = {sim.dt:.3e} s (bound {sim.dt_bound(p):.3e} s, "
                            f"record stride {sim.record_stride})"))
    except CqedError as exc:
        out.append(("error", f"simulation settings: {exc}"))
    det = cfg.detector
    nyq = det.sample_rate / 2
    edges = []
    if det.filter_kind in ("lowpass", "bandpass"):
        edges.append(det.band_high)
    if det.filter_kind in ("bandpass", "ac-highpass"):
        edges.append(det.band_low)
    for e in edges:
        if e >= nyq:
            out.append(("error", f"band edge {e / 1e6:g} MHz is at or above the digitizer "
                                 f"Nyquist frequency {nyq / 1e6:g} MHz"))
    if det.filter_kind == "none":
        out.append(("warning", "no analog filter: the decimated signal is aliased"))
    return out
