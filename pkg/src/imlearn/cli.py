"""
Command-line driver: build, sample, train, evaluate, simulate, oracle.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numeric
failure, 4 unreadable or corrupt input file, 5 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .channels import DOWN, PAULI_X, PAULI_Y, PAULI_Z, UP, ImpuritySpec
from .dynamics import (
    ControlSchedule,
    current,
    im_norm,
    impurity_trajectory,
    infidelity,
    prediction_error,
    steady_current,
    steady_current_stderr,
    temporal_entanglement_profile,
    trajectory_rows,
    transport_trajectory,
)
from .environment import (
    MAX_DENSE_QUBITS,
    ChainSpec,
    build_im_mps,
    dense_impurity_trajectory,
    dense_protocol_probability,
)
from .errors import FormatError, GuardError, NumericError, ShapeError, TrainingDiverged
from .learn import TrainConfig, TrainResult, ansatz_to_im, train
from .measurement import mixed_grain_dataset, outcome_probabilities, sample_dataset
from .tensor import identity_closure

log = logging.getLogger("imlearn")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO, EXIT_DIVERGED = 2, 3, 4, 5


class ConfigError(ValueError):
    pass


# --- configuration -----------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def chain_spec_from(section: dict) -> ChainSpec:
    try:
        return ChainSpec(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid chain section: {exc}") from exc


def train_config_from(section: dict, seed: int | None, threads: int) -> TrainConfig:
    d = dict(section)
    if seed is not None:
        d["seed"] = seed
    d["threads"] = threads
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from exc


_SINGLE_STATES = {"up": UP, "down": DOWN, "mixed": 0.5 * np.eye(2, dtype=complex)}


def initial_state_from(value, n_qubits: int) -> np.ndarray:
    """``"up"``, ``"down"``, ``"mixed"`` or a list of those (one per qubit)."""
    names = [value] * n_qubits if isinstance(value, str) else list(value)
    if len(names) != n_qubits or any(n not in _SINGLE_STATES for n in names):
        raise ConfigError(f"rho_i0 must name {n_qubits} states from {sorted(_SINGLE_STATES)}")
    rho = np.ones((1, 1), dtype=complex)
    for n in names:
        rho = np.kron(rho, _SINGLE_STATES[n])
    return rho


def observables_for(n_qubits: int) -> dict:
    single = {"X": PAULI_X, "Y": PAULI_Y, "Z": PAULI_Z, "up": UP, "down": DOWN}
    if n_qubits == 1:
        return single
    eye = np.eye(2)
    out = {}
    for name, op in single.items():
        out[f"{name}_left"] = np.kron(op, eye)
        out[f"{name}_right"] = np.kron(eye, op)
    for k, label in enumerate(("upup", "updown", "downup", "downdown")):
        p = np.zeros((4, 4))
        p[k, k] = 1.0
        out[f"p_{label}"] = p
    return out


def _descriptor(item, n_qubits: int):
    if isinstance(item, str):
        if item not in ("identity", "reset"):
            raise ConfigError(f"unknown channel {item!r}")
        return item
    if isinstance(item, dict) and set(item) == {"jx", "jy", "jz"}:
        return ImpuritySpec(float(item["jx"]), float(item["jy"]), float(item["jz"]))
    raise ConfigError(f"cannot parse channel descriptor {item!r}")


def schedule_from(section: dict, t: int) -> ControlSchedule:
    """Schedule grammar.

    ``{"type": "constant", "channel": D, "n_qubits": k}``,
    ``{"type": "reset_protocol", "impurity": {jx, jy, jz}, "reset_at": T0}`` or
    ``{"type": "list", "channels": [D, ...], "n_qubits": k}`` where ``D`` is
    ``"identity"``, ``"reset"`` or ``{jx, jy, jz}`` (two qubits).
    """
    kind = section.get("type", "constant")
    try:
        if kind == "reset_protocol":
            imp = _descriptor(section["impurity"], 2)
            t0 = int(section["reset_at"])
            if not 0 <= t0 < t:
                raise ConfigError("reset_at must lie in [0, t)")
            return ControlSchedule.reset_protocol(imp, t, t0)
        n_qubits = int(section.get("n_qubits", 1))
        if kind == "constant":
            items = [_descriptor(section.get("channel", "identity"), n_qubits)] * t
        elif kind == "list":
            items = [_descriptor(c, n_qubits) for c in section["channels"]]
            if len(items) != t:
                raise ConfigError(f"schedule lists {len(items)} channels but t={t}")
        else:
            raise ConfigError(f"unknown schedule type {kind!r}")
        return ControlSchedule.from_descriptors(items, n_qubits)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed schedule section: {exc}") from exc
    except ShapeError as exc:
        raise ConfigError(str(exc)) from exc


# --- helpers -------------------------------------------------------------------------


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, allow_nan=True) + "\n")


def _report_im(im) -> dict:
    return {
        "t": im.t,
        "bond_dims": im.bond_dims,
        "discarded_weight": float(getattr(im, "discarded_weight", 0.0)),
        "identity_closure_defect": float(abs(identity_closure(im) - 1.0)),
        "im_norm": im_norm(im),
        "te_profile": temporal_entanglement_profile(im) if im.t > 1 else [],
    }


def _seed(args, cfg, section: dict | None = None, default: int = 0) -> int:
    if args.seed is not None:
        return int(args.seed)
    if section and "seed" in section:
        return int(section["seed"])
    return int(cfg.get("seed", default))


# --- subcommands ---------------------------------------------------------------------


def cmd_build_im(args) -> int:
    cfg = load_config(args.config)
    if "chain" not in cfg:
        raise ConfigError("build-im needs a 'chain' section")
    spec = chain_spec_from(cfg["chain"])
    b = cfg.get("build", {})
    chi, tol = int(b.get("chi_max", 256)), float(b.get("svd_tol", 0.0))
    if chi < 1 or not 0.0 <= tol < 1.0:
        raise ConfigError("build needs chi_max >= 1 and svd_tol in [0, 1)")
    out = _out_dir(args, cfg)
    im = build_im_mps(spec, chi_max=chi, svd_tol=tol)
    name = args.name or b.get("name", "im.bin")
    chash = io.config_hash({"chain": cfg["chain"], "build": b})
    io.save_im(out / name, im, {"config_hash": chash})
    report = _report_im(im)
    report["config_hash"] = chash
    _write_json(out / (Path(name).stem + "_report.json"), report)
    print(out / name)
    return 0


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    sec = cfg.get("sampling", {})
    n = int(args.n if args.n is not None else sec.get("N", 0))
    grain = int(args.grain if args.grain is not None else sec.get("grain", 1))
    mixed = bool(args.mixed or sec.get("mixed", False))
    if n < 1:
        raise ConfigError("N must be a positive integer")
    if args.im is None:
        raise ConfigError("sample needs --im")
    im = io.load_im(args.im)
    if grain < 1 or im.t % grain:
        raise ConfigError(f"grain {grain} does not divide t={im.t}")
    seed = _seed(args, cfg, sec)
    if mixed:
        ds = mixed_grain_dataset(im, n, grain, seed)
    else:
        ds = sample_dataset(im, n, grain, seed)
    out = _out_dir(args, cfg)
    name = args.name or sec.get("name", "dataset.bin")
    extra = {"im_hash": io.file_hash(args.im), "config_hash": io.config_hash(sec)}
    io.save_dataset(out / name, ds, extra)
    print(out / name)
    return 0


def _write_history(path: Path, result: TrainResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_nll", "lr", "wall_seconds"])
        for row in result.history.rows():
            w.writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.6f}"])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.dataset is None:
        raise ConfigError("train needs --dataset")
    tcfg = train_config_from(cfg.get("train", {}), args.seed, args.threads)
    ds = io.load_dataset(args.dataset)
    out = _out_dir(args, cfg)
    ckpt_path = out / "checkpoint.bin"
    resume = None
    if args.resume:
        resume, saved_cfg, _ = io.load_checkpoint(args.resume)
        if {**saved_cfg.to_dict(), "threads": 0} != {**tcfg.to_dict(), "threads": 0}:
            raise ConfigError("resume checkpoint was written with a different train config")
    chash = io.config_hash(tcfg.to_dict() | {"threads": 0})

    def checkpoint(res):
        io.save_checkpoint(ckpt_path, res, tcfg, ds.t, {"config_hash": chash})

    try:
        result = train(ds, tcfg, resume=resume, checkpoint=checkpoint, stop_after=args.stop_after)
    except TrainingDiverged:
        log.error("training diverged; last checkpoint kept at %s", ckpt_path)
        return EXIT_DIVERGED
    checkpoint(result)
    _write_history(out / "history.csv", result)
    learned = ansatz_to_im(result.ansatz, ds.t)
    io.save_im(out / "learned_im.bin", learned, {"config_hash": chash})
    print(out / "learned_im.bin")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    sec = cfg.get("evaluate", {})
    if args.im_a is None or args.im_b is None:
        raise ConfigError("evaluate needs --im-a and --im-b")
    a, b = io.load_im(args.im_a), io.load_im(args.im_b)
    if a.t != b.t:
        raise ConfigError(f"IMs have different lengths ({a.t} and {b.t})")
    n_seq = int(args.n_sequences if args.n_sequences is not None else sec.get("n_sequences", 4000))
    if n_seq < 1:
        raise ConfigError("n_sequences must be positive")
    seed = _seed(args, cfg, sec)
    metrics = {
        "infidelity": infidelity(a, b),
        "epsilon": prediction_error(a, b, n_seq, seed, threads=args.threads),
        "im_norms": [im_norm(a), im_norm(b)],
        "te_profiles": [
            temporal_entanglement_profile(a) if a.t > 1 else [],
            temporal_entanglement_profile(b) if b.t > 1 else [],
        ],
        "n_sequences": n_seq,
        "seed": seed,
    }
    out = _out_dir(args, cfg)
    path = out / (args.name or "metrics.json")
    _write_json(path, metrics)
    print(json.dumps({k: metrics[k] for k in ("infidelity", "epsilon")}))
    return 0


def _simulate(ims, sec: dict):
    t = ims[0].t
    schedule = schedule_from(sec.get("schedule", {}), t)
    k = len(ims)
    if schedule.n_qubits != k:
        raise ConfigError(f"{k} IM(s) need a {k}-qubit schedule")
    if schedule.t != t:
        raise ConfigError("schedule and IM lengths differ")
    rho0 = initial_state_from(sec.get("rho_i0", "up"), k)
    allowed = observables_for(k)
    names = sec.get("observables", list(allowed))
    bad = [n for n in names if n not in allowed]
    if bad:
        raise ConfigError(f"unknown observables {bad}; choose from {sorted(allowed)}")
    obs = {n: allowed[n] for n in names}
    if k == 1:
        traj = impurity_trajectory(ims[0], schedule, rho0, obs)
    else:
        traj = transport_trajectory(ims[0], ims[1], schedule, rho0, obs)
    return traj, schedule, rho0, obs


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sec = cfg.get("simulate", {})
    if args.im is None:
        raise ConfigError("simulate needs --im (and optionally --im-right)")
    ims = [io.load_im(args.im)]
    if args.im_right:
        ims.append(io.load_im(args.im_right))
        if ims[1].t != ims[0].t:
            raise ConfigError("left and right IMs have different lengths")
    traj, _, _, obs = _simulate(ims, sec)
    out = _out_dir(args, cfg)
    path = out / (args.name or "trajectory.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "observable_name", "value_half_step", "value_full_step", "current"])
        for row in trajectory_rows(traj, list(obs)):
            w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])
    summary = {"trace_defect": traj.trace_defect(), "psd_violation": traj.psd_violation(),
               "closure_defect": float(traj.closure_defect)}
    window = sec.get("window")
    if window is not None:
        for name in obs:
            cur = current(traj, obs[name])
            sl = slice(*window)
            summary[f"steady_current_{name}"] = steady_current(cur, sl)
            summary[f"steady_current_stderr_{name}"] = steady_current_stderr(cur, sl)
    _write_json(out / (Path(path).stem + "_summary.json"), summary)
    print(path)
    return 0


def cmd_oracle(args) -> int:
    """Cross-check MPS contractions against dense joint evolution for a guard-sized config."""
    cfg = load_config(args.config)
    if "chain" not in cfg:
        raise ConfigError("oracle needs a 'chain' section")
    spec = chain_spec_from(cfg["chain"])
    sec = cfg.get("oracle", {})
    two = bool(sec.get("two_leads", False))
    n_qubits = (2 + 2 * spec.length) if two else (1 + spec.length)
    if n_qubits > MAX_DENSE_QUBITS:
        raise ConfigError(f"dense oracle needs at most {MAX_DENSE_QUBITS} qubits, config has {n_qubits}")
    im = build_im_mps(spec)
    report = {"chain": spec.to_dict()}
    if not two:
        rng = np.random.default_rng(_seed(args, cfg, sec))
        worst = 0.0
        for grain in sec.get("grains", [1]):
            if spec.steps % grain:
                raise ConfigError(f"grain {grain} does not divide t")
            strings = rng.integers(0, 4, (int(sec.get("n_strings", 50)), 2 * (spec.steps // grain)))
            p_mps = outcome_probabilities(im, strings, grain)
            p_dense = np.array([dense_protocol_probability(spec, s, grain) for s in strings])
            worst = max(worst, float(np.abs(p_mps - p_dense).max()))
        report["max_probability_deviation"] = worst
    ims = [im, im] if two else [im]
    traj, schedule, rho0, obs = _simulate(ims, cfg.get("simulate", {}))
    specs = (spec, spec) if two else spec
    ref = dense_impurity_trajectory(specs, schedule, rho0, obs)
    report["max_state_deviation"] = float(
        max(np.abs(traj.rho_full - ref.rho_full).max(), np.abs(traj.rho_half - ref.rho_half).max())
    )
    out = _out_dir(args, cfg)
    _write_json(out / (args.name or "oracle_report.json"), report)
    print(json.dumps(report))
    return 0


# --- entry point --------------------------------------------------------------------


def _setup_logging():
    level = os.environ.get("IMLEARN_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s"
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imlearn", description=__doc__.splitlines()[1])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--name", help="output file name")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads (results do not depend on this)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("build-im", parents=[common], help="first-principles IM of a spin chain")
    s = sub.add_parser("sample", parents=[common], help="sample SIC-POVM strings from an IM")
    s.add_argument("--im")
    s.add_argument("--n", type=int)
    s.add_argument("--grain", type=int)
    s.add_argument("--mixed", action="store_true", help="half grain 1, half --grain")
    s = sub.add_parser("train", parents=[common], help="maximum-likelihood training")
    s.add_argument("--dataset")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--stop-after", type=int, help="stop after this many epochs in total")
    s = sub.add_parser("evaluate", parents=[common], help="compare two IMs")
    s.add_argument("--im-a")
    s.add_argument("--im-b")
    s.add_argument("--n-sequences", type=int)
    s = sub.add_parser("simulate", parents=[common], help="impurity dynamics and currents")
    s.add_argument("--im")
    s.add_argument("--im-right")
    sub.add_parser("oracle", parents=[common], help="dense cross-checks on small chains")
    return p


COMMANDS = {
    "build-im": cmd_build_im,
    "sample": cmd_sample,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    if args.threads < 1:
        log.error("--threads must be positive")
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, GuardError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except FormatError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
