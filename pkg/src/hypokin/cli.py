"""Command-line entry point: mesh, verify, constants, run and certify.

Every command reads an optional JSON experiment config (``--config``), writes its outputs
under ``--out`` and exits 0 exactly when the invariants it asserts hold.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .boundary import boundary_invariants, build_boundary
from .collision import KINDS, CollisionModel, verify_assumptions
from .geometry import AlphaProfile, DomainSpec, build_normalized_mesh
from .korn import INEQUALITIES, korn_constant, poincare_wirtinger_report, robin_poincare_report
from .transport import INITIAL_KINDS, KineticSystem, RunConfig, initial_state, run
from .velocity import gauss_hermite_grid
from . import hypocoercivity as hc

log = logging.getLogger("hypokin")

SCHEMA_VERSION = 1
CONSERVATION_TOL = 1e-10
LYAPUNOV_TOL = 1e-10


@dataclass
class ExperimentConfig:
    """Versioned experiment description; unknown keys are rejected."""

    schema: int = SCHEMA_VERSION
    domain: dict = field(default_factory=lambda: {"shape": "unit-square"})
    alpha: object = 1.0
    h: float = 0.1
    n_per_axis: int = 8
    collision: dict = field(default_factory=lambda: {"kind": "bgk"})
    specular: str = "isometric"
    epsilons: list = field(default_factory=lambda: [1.0])
    eta: object = "auto"
    variant: str = "strong"
    n_samples: int = 200
    t_end: float = 5.0
    cfl: float = 0.5
    record_every: int = 10
    initial_condition: dict = field(default_factory=lambda: {"kind": "random"})
    inequalities: list = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(data) - known)
        if extra:
            raise ValueError(f"unknown config keys: {extra}")
        schema = data.get("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {schema!r} (expected {SCHEMA_VERSION})")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.alpha_profile()
        self.domain_spec()
        self.model()
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.specular not in ("isometric", "bilinear"):
            raise ValueError(f"unknown specular method {self.specular!r}")
        if not self.epsilons or any(not 0 < float(e) <= 1 for e in self.epsilons):
            raise ValueError("epsilons must be a non-empty list in (0, 1]")
        if self.eta != "auto":
            hc.HypoParams(float(self.eta))
        if self.variant not in hc.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.initial_condition.get("kind", "random") not in INITIAL_KINDS:
            raise ValueError(f"unknown initial condition {self.initial_condition.get('kind')!r}")
        for name in self.inequalities:
            if name not in INEQUALITIES:
                raise ValueError(f"unknown inequality {name!r}")

    def alpha_profile(self) -> AlphaProfile:
        if isinstance(self.alpha, dict):
            return AlphaProfile.from_dict(self.alpha)
        return AlphaProfile.constant(float(self.alpha))

    def domain_spec(self) -> DomainSpec:
        d = dict(self.domain)
        if "vertices" in d:
            d["vertices"] = tuple(tuple(map(float, p)) for p in d["vertices"])
        return DomainSpec(alpha=self.alpha_profile(), **d)

    def model(self) -> CollisionModel:
        c = dict(self.collision)
        if c.get("kind", "bgk") not in KINDS:
            raise ValueError(f"unknown collision kind {c.get('kind')!r}")
        return CollisionModel(**c)

    def to_dict(self) -> dict:
        return asdict(self)


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent deterministic stream per consumer, derived from the single seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _build(cfg: ExperimentConfig):
    mesh = build_normalized_mesh(cfg.domain_spec(), cfg.h)
    grid = gauss_hermite_grid(cfg.n_per_axis)
    model = cfg.model()
    return KineticSystem(mesh, grid, model, build_boundary(mesh, grid, cfg.specular))


# -- commands -------------------------------------------------------------------------------

def cmd_mesh(cfg: ExperimentConfig, out: Path) -> int:
    mesh = build_normalized_mesh(cfg.domain_spec(), cfg.h)
    mesh.save(out / "mesh.json")
    normals_ok = bool(np.allclose(np.linalg.norm(mesh.boundary_normals, axis=1), 1.0, atol=1e-12))
    log.info("mesh: %d cells, %d vertices, h_max %.4g", mesh.n_cells, mesh.n_vertices, mesh.h_max)
    return 0 if normals_ok and abs(mesh.total_area - 1.0) < 1e-10 else 1


def cmd_verify(cfg: ExperimentConfig, out: Path) -> int:
    system = _build(cfg)
    rep = verify_assumptions(system.model, system.grid)
    inv = boundary_invariants(system.boundary)
    expected_kernel = 4 if system.model.conserves_momentum_energy else 1
    checks = {
        "kernel_dim": rep.kernel_dim == expected_kernel,
        "self_adjoint": rep.self_adjoint_residual <= 1e-12,
        "spectral_gap": rep.spectral_gap > 0,
        "conservation": rep.conservation_residual <= 1e-12,
        "boundary": inv["ok"],
    }
    if system.model.kind == "weak-bgk":
        checks["weak_gap"] = abs(rep.weak_gap - system.model.lam) <= 1e-10
    _write_json(out / "verify.json", {"collision": rep.to_dict(), "boundary": inv, "checks": checks})
    for k, ok in checks.items():
        log.info("verify %-14s %s", k, "ok" if ok else "FAILED")
    return 0 if all(checks.values()) else 1


def cmd_constants(cfg: ExperimentConfig, out: Path) -> int:
    mesh = build_normalized_mesh(cfg.domain_spec(), cfg.h)
    names = list(cfg.inequalities)
    if not names:
        names = ["PW"] + (["Korn-rigid"] if mesh.alpha_is_zero else ["Robin-P", "Korn-Robin"])
    seed = int(rng_for(cfg.seed, "korn").integers(2**31))
    reports = []
    for name in names:
        if name == "PW":
            r = poincare_wirtinger_report(mesh, cfg.n_samples, seed)
        elif name == "Robin-P":
            r = robin_poincare_report(mesh, None, cfg.n_samples, seed)
        else:
            variant = {"Korn-Robin": "robin", "Korn-rigid": "rigid", "Korn-L2": "l2"}[name]
            r = korn_constant(mesh, None, variant, cfg.n_samples, seed)
        log.info("%-10s C = %.6g (lambda %.6g, %d violations)", name, r.constant, r.eigenvalue, r.violations)
        reports.append(r.to_dict())
    _write_json(out / "constants.json", reports)
    return 0 if all(r["certified"] for r in reports) else 1


def _params(cfg: ExperimentConfig, eta: float, epsilon: float) -> hc.HypoParams:
    return hc.HypoParams(eta, epsilon if cfg.variant == "epsilon" else 1.0, cfg.variant)


def _certify(cfg: ExperimentConfig, system, aux) -> hc.CertificateReport:
    seed = int(rng_for(cfg.seed, "certificate").integers(2**31))
    return hc.coercivity_certificate(system, cfg.eta, cfg.n_samples, seed, cfg.variant,
                                     [float(e) for e in cfg.epsilons], aux)


def cmd_certify(cfg: ExperimentConfig, out: Path) -> int:
    system = _build(cfg)
    rep = _certify(cfg, system, hc.AuxOperators(system))
    _write_json(out / "certificate.json", rep.to_dict())
    log.info("certificate kappa = %.6g at eta = %.4g (plain %.4g)", rep.kappa, rep.eta, rep.kappa_plain)
    if not rep.certified:
        np.save(out / "worst_state.npy", rep.worst_state)
        log.warning("non-positive certificate; violating state saved to worst_state.npy")
        return 1
    return 0


def cmd_run(cfg: ExperimentConfig, out: Path) -> int:
    system = _build(cfg)
    aux = hc.AuxOperators(system)
    if cfg.eta == "auto":
        eta = _certify(cfg, system, aux).eta
    else:
        eta = float(cfg.eta)
    ok = True
    summary = {}
    for eps in [float(e) for e in cfg.epsilons]:
        params = _params(cfg, eta, eps)
        state = initial_state(system, cfg.initial_condition, rng_for(cfg.seed, "initial"), eps)
        rc = RunConfig(cfg.t_end, eps, cfg.cfl, cfg.record_every, system.model, cfg.initial_condition)
        traj = run(system, rc, state, lyapunov=hc.lyapunov_functional(params, aux))
        tag = f"eps{eps:g}"
        traj.to_csv(out / f"trajectory_{tag}.csv")
        norm0 = max(traj.rows[0]["H_norm"], 1e-300)
        drift = float(np.max(np.abs(traj.column("mass_residual"))))
        lyap = traj.column("lyap")
        increases = int(np.sum(lyap[1:] > lyap[:-1] * (1.0 + LYAPUNOV_TOL) + 1e-300))
        try:
            decay = hc.fit_decay(traj.times, traj.norms).to_dict()
        except ValueError as exc:   # e.g. zero data: nothing to fit
            decay = {"kappa": None, "error": str(exc)}
        report = {"epsilon": eps, "eta": eta, "steps": traj.steps, "dt": traj.dt, "decay": decay,
                  "conservation_drift": drift, "lyapunov_increases": increases}
        _write_json(out / f"decay_{tag}.json", report)
        summary[tag] = report
        ok &= drift <= CONSERVATION_TOL * max(norm0, 1.0)
        log.info("run %s: %d steps, kappa %s, drift %.2e", tag, traj.steps, decay.get("kappa"), drift)
    _write_json(out / "run_summary.json", summary)
    return 0 if ok else 1


COMMANDS = {"mesh": cmd_mesh, "verify": cmd_verify, "constants": cmd_constants,
            "run": cmd_run, "certify": cmd_certify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypokin", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="BLAS threads (default: $HYPO_THREADS or library default)")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--shape", help="override domain shape")
    p.add_argument("--h", type=float, help="override mesh size")
    p.add_argument("--alpha", type=float, help="override constant accommodation")
    return p


def load_config(args) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.shape is not None:
        data["domain"] = {**data.get("domain", {}), "shape": args.shape}
    if args.h is not None:
        data["h"] = args.h
    if args.alpha is not None:
        data["alpha"] = args.alpha
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        log.error("invalid configuration: %s", exc)
        return 2
    threads = args.threads
    if threads is None and os.environ.get("HYPO_THREADS"):
        threads = int(os.environ["HYPO_THREADS"])
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "config.json", cfg.to_dict())
    with threadpool_limits(limits=threads):
        try:
            return COMMANDS[args.command](cfg, args.out)
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            log.error("%s failed: %s", args.command, exc)
            return 1


if __name__ == "__main__":
    sys.exit(main())
