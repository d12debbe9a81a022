"""Run-configuration schema: a versioned JSON document describing a scenario
(either a named preset or an inline model/kernel/closure binding) plus
execution parameters.  Parsing then emitting then parsing is the identity on
the normalized form."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import (
    BathSpectrum,
    OUParams,
    QuadratureMap,
    WhiteNoiseSpec,
    bath_kernel,
    exponential_kernel,
    grid_kernel,
    quadrature_kernel,
    scale_kernel,
    white_kernel,
)
from .operators import NAMED_OPERATORS
from .scenarios import PRESET_NAMES, Scenario, preset
from .unraveling import Closure, SystemModel

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed configuration (CLI exit code 2)."""


def parse_matrix(obj) -> np.ndarray:
    """A matrix is either the name of a standard operator or a nested list of
    [re, im] pairs."""
    if isinstance(obj, str):
        if obj not in NAMED_OPERATORS:
            raise ConfigError(f"unknown operator name {obj!r}")
        return NAMED_OPERATORS[obj].copy()
    try:
        arr = np.asarray(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse matrix: {exc}") from exc
    if arr.ndim == 3 and arr.shape[-1] == 2:
        return arr[..., 0] + 1j * arr[..., 1]
    raise ConfigError("matrices are nested [re, im] pairs or named presets")


def parse_vector(obj) -> np.ndarray:
    arr = np.asarray(obj, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigError("vectors are lists of [re, im] pairs")
    return arr[:, 0] + 1j * arr[:, 1]


def emit_matrix(a: np.ndarray) -> list:
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def kernel_from_spec(spec: dict):
    """Tagged-union kernel specification -> CorrelationKernel."""
    if "type" not in spec:
        raise ConfigError("kernel spec needs a 'type' tag")
    ktype = spec["type"]
    scale = float(spec.get("scale", 1.0))
    try:
        if ktype == "exponential":
            k = exponential_kernel(
                OUParams(
                    gamma=float(spec["gamma"]),
                    omega=float(spec.get("omega", 0.0)),
                    d=float(spec["d"]),
                    d_prime=float(spec.get("d_prime", 0.0)),
                )
            )
        elif ktype == "white":
            c = parse_matrix(spec["c"]) if "c" in spec else np.zeros((1, 1))
            k = white_kernel(WhiteNoiseSpec(c=c, epsilon=float(spec["epsilon"])))
        elif ktype in ("bath", "quadrature-bath"):
            modes = tuple(
                (complex(g_re, g_im), float(w), float(n)) for g_re, g_im, w, n in spec["modes"]
            )
            b = BathSpectrum(modes=modes, carrier=float(spec.get("carrier", 0.0)))
            channel = spec.get("channel_of_mode")
            h = [complex(re, im) for re, im in spec["h"]] if "h" in spec else None
            if ktype == "bath":
                k = bath_kernel(b, channel, h)
            else:
                qmap = QuadratureMap(
                    m=parse_matrix(spec["m"]),
                    m_dag=parse_matrix(spec["m_dag"]) if "m_dag" in spec else None,
                )
                k = quadrature_kernel(b, qmap, channel, h).kernel
        elif ktype == "grid":
            grid = np.asarray(spec["grid"], dtype=float)
            chi_v, eta_v = load_kernel_csv(spec["path"], len(grid), int(spec.get("n_channels", 1)))
            k = grid_kernel(grid, chi_v, eta_v)
        else:
            raise ConfigError(f"unknown kernel type {ktype!r}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad kernel spec: {exc}") from exc
    return scale_kernel(k, scale) if scale != 1.0 else k


def load_kernel_csv(path, n_times: int, n_channels: int):
    """CSV with columns (i, j, alpha, beta, re_chi, im_chi, re_eta, im_eta)."""
    chi = np.zeros((n_times, n_times, n_channels, n_channels), dtype=complex)
    eta = np.zeros_like(chi)
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    for row in data:
        i, j, a, b = int(row["i"]), int(row["j"]), int(row["alpha"]), int(row["beta"])
        chi[i, j, a, b] = row["re_chi"] + 1j * row["im_chi"]
        eta[i, j, a, b] = row["re_eta"] + 1j * row["im_eta"]
    return chi, eta


def scenario_from_inline(spec: dict) -> Scenario:
    try:
        model = SystemModel(
            h_s=parse_matrix(spec["model"]["h_s"]),
            couplings=tuple(parse_matrix(m) for m in spec["model"]["couplings"]),
            lam=float(spec["model"].get("lambda", 1.0)),
        )
        kernel = kernel_from_spec(spec["kernel"])
        closure = Closure.from_string(spec["closure"])
        t_end = float(spec["grid"]["t_end"])
        dt = float(spec["grid"]["dt"])
        n = int(round(t_end / dt))
        grid = np.linspace(0.0, t_end, n + 1)
        psi0 = parse_vector(spec["psi0"])
        observables = {name: parse_matrix(m) for name, m in spec.get("observables", {}).items()}
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad inline scenario: {exc}") from exc
    return Scenario(
        name=spec.get("name", "inline"),
        model=model,
        kernel=kernel,
        closure=closure,
        grid=grid,
        dt=dt,
        psi0=psi0,
        observables=observables,
        default_ensemble=int(spec.get("ensemble", 1000)),
        default_seed=int(spec.get("seed", 0)),
        checks=tuple(spec.get("checks", ("kernel-positivity", "trace-preservation"))),
    )


@dataclass
class RunConfig:
    """Execution parameters around a scenario: ensemble size, master seed,
    integrator step, output directory, checks and worker count."""

    scenario: str | None = None
    inline: dict | None = None
    ensemble: int | None = None
    seed: int | None = None
    dt: float | None = None
    out: str = "out"
    checks: list | None = None
    threads: int = 1

    def __post_init__(self):
        if (self.scenario is None) == (self.inline is None):
            raise ConfigError("exactly one of 'scenario' (preset name) or 'inline' is required")
        if self.scenario is not None and self.scenario not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.scenario!r}; options: {PRESET_NAMES}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def build_scenario(self) -> Scenario:
        return preset(self.scenario) if self.scenario else scenario_from_inline(self.inline)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if d.get("schema") != SCHEMA_VERSION:
            raise ConfigError(f"config must declare 'schema': {SCHEMA_VERSION}")
        known = {"schema", "scenario", "inline", "ensemble", "seed", "dt", "out", "checks", "threads"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: d[k] for k in known - {"schema"} if k in d}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA_VERSION}
        for k, v in asdict(self).items():
            if v is None or (k == "out" and v == "out") or (k == "threads" and v == 1):
                continue
            out[k] = v
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def preset_to_config(name: str) -> dict:
    """An editable config document equivalent to the named preset."""
    sc = preset(name)
    return {
        "schema": SCHEMA_VERSION,
        "scenario": name,
        "ensemble": sc.default_ensemble,
        "seed": sc.default_seed,
        "dt": sc.dt,
        "checks": list(sc.checks),
    }
