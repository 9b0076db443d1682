"""Reproducible experiment harness.

Subcommands: generate | sample | recover | evaluate | bound | sweep.

Configuration is a key=value file (full-line ``#`` comments allowed); every
key is documented in ``KEY_HELP`` and unknown keys are rejected. Command
line flags override file values. Every command writes a ``manifest.json``
carrying the resolved configuration, its hash, and the seeds used;
re-running with ``--config <manifest.json>`` reproduces all artifacts
bit-exactly.

The scenario ground truth is drawn from the ``seed`` key alone. Trial seeds
(``seeds`` list, or ``seed + 0 .. trials - 1``) drive everything stochastic
within a trial: sensor placement, quantization noise, and solver
initialization. ``RMC_THREADS`` caps how many trials run in parallel.

Metric rows are ``scenario,seed,method,ssim,nmse,runtime_s``; appends hold
an exclusive lock so concurrent runs may share one CSV. Outputs are CSV and
RMT tensors only; plotting is left to external tools.
"""

from __future__ import annotations

import argparse
import fcntl
import hashlib
import itertools
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import analysis, baselines, core, decoder, solver, synth
from .core import InvalidArgumentError, RmcError

__all__ = ["main", "ExperimentConfig", "ConfigError", "parse_config_file"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

METHODS = ("proposed", "naive", "idw", "btd")
INIT_SCHEMES = ("btd", "interp", "uniform", "xavier")
METRICS_HEADER = "scenario,seed,method,ssim,nmse,runtime_s"


class ConfigError(RmcError):
    """Bad configuration file or flag combination."""


def _parse_method(v: str) -> str:
    if v not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {v!r}")
    return v


def _parse_init(v: str) -> str:
    if v not in INIT_SCHEMES:
        raise ConfigError(f"init must be one of {INIT_SCHEMES}, got {v!r}")
    return v


def _parse_seed_list(v: str) -> tuple[int, ...]:
    if not v:
        return ()
    return tuple(int(x) for x in v.split(","))


# key -> (parser, default, sweepable, help)
SCHEMA: dict[str, tuple] = {
    "I": (int, 64, False, "grid rows"),
    "J": (int, 64, False, "grid columns"),
    "K": (int, 64, False, "frequency bins"),
    "R": (int, 2, True, "ground-truth emitter count"),
    "Xc": (float, 90.0, True, "shadowing decorrelation distance (m)"),
    "eta": (float, 6.0, True, "shadowing std (dB)"),
    "path_loss_exponent": (float, 2.0, False, "path loss exponent"),
    "psd_components_min": (int, 2, False, "min Gaussian bumps per PSD"),
    "psd_components_max": (int, 4, False, "max Gaussian bumps per PSD"),
    "psd_amp_min": (float, 0.5, False, "min bump amplitude"),
    "psd_amp_max": (float, 2.0, False, "max bump amplitude"),
    "psd_width_min": (float, 2.0, False, "min bump width (bins)"),
    "psd_width_max": (float, 6.0, False, "max bump width (bins)"),
    "rho": (float, 0.10, True, "observed cell fraction in (0, 1]"),
    "B": (int, 0, True, "quantizer bit depth; 0 = full precision"),
    "sigma": (float, 0.1, False, "quantizer noise std (h-units)"),
    "a_offset": (float, 1e-3, False, "h-transform offset a"),
    "method": (_parse_method, "proposed", True, "recovery method"),
    "Rhat": (int, 0, True, "emitter count assumed by recovery; 0 = R"),
    "init": (_parse_init, "interp", False, "proposed-method initialization"),
    "alpha": (float, 0.001, False, "Adam step size for C"),
    "beta": (float, 0.05, False, "Adam step size for Z and theta"),
    "max_iter": (int, 300, False, "outer iteration cap"),
    "tol": (float, 1e-3, False, "relative loss-change stopping tolerance"),
    "patience": (int, 3, False, "consecutive small changes required to stop"),
    "lambda1": (float, 0.001, False, "latent-code penalty weight"),
    "lambda2": (float, 0.001, False, "PSD penalty weight"),
    "lambda3": (float, 0.0001, False, "conv-kernel penalty weight"),
    "rank_L": (int, 4, False, "BTD per-emitter SLF rank"),
    "btd_iters": (int, 80, False, "BTD block cycles"),
    "btd_restarts": (int, 3, False, "BTD seeded restarts"),
    "idw_power": (float, 2.0, False, "IDW distance power"),
    "seed": (int, 0, False, "scenario seed; also the base trial seed"),
    "trials": (int, 1, False, "number of trial seeds (seed .. seed+trials-1)"),
    "seeds": (_parse_seed_list, (), False, "explicit trial seed list"),
    "out": (str, "out", False, "output directory"),
    "truth": (str, "", False, "ground-truth RMT path; default <out>/truth.rmt"),
}

KEY_HELP = "\n".join(f"  {k:22s} {v[3]} (default {v[1]!r})" for k, v in SCHEMA.items())


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated snapshot of every configuration key."""

    values: tuple[tuple[str, object], ...]

    def __getattr__(self, name: str):
        if name.startswith("_") or name == "values":
            raise AttributeError(name)
        for key, value in object.__getattribute__(self, "values"):
            if key == name:
                return value
        raise AttributeError(name)

    def get(self, name: str):
        return getattr(self, name)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        unknown = set(kw) - {k for k, _ in self.values}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(
            tuple((k, kw.get(k, v)) for k, v in self.values)
        )

    def to_strings(self) -> dict[str, str]:
        out = {}
        for key, value in self.values:
            if isinstance(value, tuple):
                out[key] = ",".join(str(x) for x in value)
            else:
                out[key] = repr(value) if isinstance(value, float) else str(value)
        return out

    def config_hash(self) -> str:
        canon = "\n".join(f"{k}={v}" for k, v in sorted(self.to_strings().items()))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @classmethod
    def from_items(cls, items: list[tuple[str, str]]) -> "ExperimentConfig":
        seen: dict[str, object] = {}
        for key, raw in items:
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            if key in seen:
                raise ConfigError(f"duplicate config key {key!r}")
            parser = SCHEMA[key][0]
            try:
                seen[key] = parser(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
        return cls(tuple((k, seen.get(k, spec[1])) for k, spec in SCHEMA.items()))

    # Derived objects -------------------------------------------------

    def scenario_config(self) -> synth.ScenarioConfig:
        return synth.ScenarioConfig(
            I=self.I, J=self.J, K=self.K, R=self.R,
            xc=self.Xc, eta_db=self.eta,
            path_loss_exponent=self.path_loss_exponent,
            psd_components=(self.psd_components_min, self.psd_components_max),
            psd_amplitude=(self.psd_amp_min, self.psd_amp_max),
            psd_width=(self.psd_width_min, self.psd_width_max),
        )

    def solver_config(self) -> solver.SolverConfig:
        from .objectives import RegWeights

        return solver.SolverConfig(
            alpha=self.alpha, beta=self.beta, max_iter=self.max_iter,
            tol=self.tol, patience=self.patience,
            reg=RegWeights(self.lambda1, self.lambda2, self.lambda3),
            init_scheme=self.init,
        )

    def btd_config(self, seed: int) -> baselines.BtdConfig:
        return baselines.BtdConfig(
            rank=self.rank_L, iters=self.btd_iters, restarts=self.btd_restarts, seed=seed
        )

    def trial_seeds(self) -> tuple[int, ...]:
        if self.seeds:
            return self.seeds
        return tuple(self.seed + t for t in range(self.trials))

    def effective_rhat(self) -> int:
        return self.Rhat if self.Rhat > 0 else self.R

    def scenario_tag(self) -> str:
        tag = f"R{self.R}_rho{self.rho:g}_Xc{self.Xc:g}_eta{self.eta:g}_B{self.B}"
        if (self.I, self.J, self.K) != (64, 64, 64):
            tag = f"{self.I}x{self.J}x{self.K}_" + tag
        if self.Rhat > 0 and self.Rhat != self.R:
            tag += f"_Rhat{self.Rhat}"
        return tag


def parse_config_file(path: str | Path) -> list[tuple[str, str]]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            items.append((key.strip(), value.strip()))
    return items


def _load_config(path: str | None) -> tuple[ExperimentConfig, dict | None]:
    """Read a key=value file or a manifest.json; returns (config, manifest)."""
    if path is None:
        return ExperimentConfig.from_items([]), None
    if str(path).endswith(".json"):
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        items = list(manifest.get("config", {}).items())
        config = ExperimentConfig.from_items(items)
        if not config.truth:
            # anchor the recorded truth to the manifest's own directory so a
            # re-run into a fresh --out reads the same ground truth
            sibling = Path(path).parent / "truth.rmt"
            if sibling.exists():
                config = config.with_overrides(truth=str(sibling))
        return config, manifest
    return ExperimentConfig.from_items(parse_config_file(path)), None


# --------------------------------------------------------------------------
# Manifests and metric rows
# --------------------------------------------------------------------------

def _write_manifest(out: Path, command: str, config: ExperimentConfig, seeds, files, extra=None):
    manifest = {
        "command": command,
        "config": config.to_strings(),
        "config_hash": config.config_hash(),
        "seeds": list(seeds),
        "files": files,
        "version": 1,
    }
    if extra:
        manifest.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _append_metrics(path: Path, rows: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            if fh.tell() == 0:
                fh.write(METRICS_HEADER + "\n")
            for row in rows:
                fh.write(row + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def _write_trace(path: Path, trace: np.ndarray, loss_kind: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# loss_kind={loss_kind}\n")
        fh.write("iter,loss\n")
        for i, value in enumerate(trace):
            fh.write(f"{i},{value!r}\n")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_generate(config: ExperimentConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario = synth.generate_scenario(config.scenario_config(), config.seed)
    files = {"truth": "truth.rmt", "psd": "psd.rmt"}
    core.tensor_write(scenario.truth, out / "truth.rmt")
    core.tensor_write(
        core.RadioMapTensor(scenario.psd.data[:, :, None]), out / "psd.rmt"
    )
    for r, slf in enumerate(scenario.slfs):
        name = f"slf_{r:02d}.rmt"
        core.tensor_write(core.RadioMapTensor(slf.data[:, :, None]), out / name)
        files[f"slf_{r:02d}"] = name
    _write_manifest(
        out, "generate", config, [config.seed], files,
        extra={"emitters": [list(e) for e in scenario.emitters]},
    )
    print(f"wrote {config.I}x{config.J}x{config.K} scenario with R={config.R} to {out}")
    return EXIT_OK


def _truth_path(config: ExperimentConfig) -> Path:
    if config.truth:
        return Path(config.truth)
    return Path(config.out) / "truth.rmt"


def _sample_trial(truth: core.RadioMapTensor, config: ExperimentConfig, trial_seed: int):
    """Draw the mask and sensor payload for one trial seed."""
    mask = core.mask_sample(config.I, config.J, config.rho, core.derive_seed(trial_seed, "mask"))
    fibers = core.apply_mask(truth, mask)
    if config.B == 0:
        payload = synth.h_transform(fibers.values, config.a_offset)
        return mask, payload, None
    spec = synth.design_quantizer(fibers.values, config.B, config.sigma, config.a_offset)
    labels = synth.quantize_fibers(fibers, spec, core.derive_seed(trial_seed, "qnoise"))
    return mask, labels, spec


def cmd_sample(config: ExperimentConfig) -> int:
    """Write each trial's mask plus its sensor payload.

    Full-precision payloads are stored as the raw observed fibers in linear
    power (an (N, K, 1) RMT tensor); the h-transform is a pure function of
    them, so this keeps the file nonnegative and bit-exact. Quantized
    payloads store the integer labels, with the quantizer recorded in the
    manifest.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = core.tensor_read(_truth_path(config))
    seeds = config.trial_seeds()
    files = {}
    quantizers = {}
    for trial_seed in seeds:
        mask, payload, spec = _sample_trial(truth, config, trial_seed)
        mask_name = f"mask_s{trial_seed}.csv"
        core.mask_write(mask, out / mask_name)
        files[f"mask_{trial_seed}"] = mask_name
        if spec is None:
            stored = truth.data[mask.locations[:, 0], mask.locations[:, 1], :]
            data_name = f"fibers_s{trial_seed}.rmt"
        else:
            stored = payload.astype(np.float64)
            data_name = f"labels_s{trial_seed}.rmt"
            quantizers[str(trial_seed)] = {
                "bins": [float(b) for b in spec.bins[1:-1]],
                "sigma": spec.sigma, "a_offset": spec.a_offset, "bits": spec.bits,
            }
        core.tensor_write(core.RadioMapTensor(stored[:, :, None]), out / data_name)
        files[f"payload_{trial_seed}"] = data_name
    _write_manifest(out, "sample", config, seeds, files, extra={"quantizers": quantizers})
    print(f"sampled {len(seeds)} trial(s) at rho={config.rho:g}, B={config.B} into {out}")
    return EXIT_OK


def _run_method(config, mask, payload, spec, trial_seed):
    """Dispatch one recovery; returns (estimate, trace or None, loss_kind)."""
    dims = (config.I, config.J)
    rhat = config.effective_rhat()
    loss_kind = "fp" if spec is None else "quantized"
    scfg = config.solver_config()
    if config.method == "proposed":
        arch = decoder.DecoderArch.default(config.I)
        result = solver.recover(
            payload, mask, arch, rhat, scfg, loss_kind,
            core.derive_seed(trial_seed, "solver"),
            a_offset=config.a_offset if spec is None else None,
            quantizer=spec,
        )
        return result.estimate, result.trace, loss_kind
    if config.method == "naive":
        result = baselines.naive_unn_recover(
            payload, mask, dims, rhat, scfg, core.derive_seed(trial_seed, "naive"),
            loss_kind=loss_kind,
            a_offset=config.a_offset if spec is None else None,
            quantizer=spec,
        )
        return result.estimate, result.trace, loss_kind
    y = payload if spec is None else synth.dequantize_labels(payload, spec)
    if config.method == "idw":
        est = baselines.idw_interpolate(y, mask, dims, config.idw_power, a_offset=config.a_offset)
        return est, None, loss_kind
    result = baselines.btd_recover(
        y, mask, dims, rhat, config.btd_config(core.derive_seed(trial_seed, "btd")),
        a_offset=config.a_offset,
    )
    return result.estimate, result.trace, loss_kind


def _recover_trial(args) -> dict:
    config, truth_path, out_dir, trial_seed = args
    truth = core.tensor_read(truth_path)
    mask, payload, spec = _sample_trial(truth, config, trial_seed)
    started = time.perf_counter()
    diverged = False
    trace = None
    try:
        estimate, trace, loss_kind = _run_method(config, mask, payload, spec, trial_seed)
    except solver.DivergedError as exc:
        estimate, loss_kind, diverged = exc.estimate, ("fp" if spec is None else "quantized"), True
        trace = exc.trace
    runtime = time.perf_counter() - started
    files = {}
    if diverged:
        ssim = nmse_val = float("nan")
    else:
        ssim = analysis.ssim_log_avg(truth, estimate, config.a_offset)
        nmse_val = analysis.nmse(truth, estimate)
        est_name = f"estimate_{config.method}_s{trial_seed}.rmt"
        core.tensor_write(estimate, Path(out_dir) / est_name)
        files["estimate"] = est_name
    if trace is not None and len(trace):
        trace_name = f"trace_{config.method}_s{trial_seed}.csv"
        _write_trace(Path(out_dir) / trace_name, trace, loss_kind)
        files["trace"] = trace_name
    row = (
        f"{config.scenario_tag()},{trial_seed},{config.method},"
        f"{ssim!r},{nmse_val!r},{runtime:.3f}"
    )
    return {
        "seed": trial_seed, "row": row, "files": files,
        "diverged": diverged, "loss_kind": loss_kind,
    }


def _max_workers(n_tasks: int) -> int:
    cap = os.environ.get("RMC_THREADS", "1")
    try:
        cap_n = max(1, int(cap))
    except ValueError:
        raise ConfigError(f"RMC_THREADS must be an integer, got {cap!r}")
    return max(1, min(n_tasks, cap_n))


def cmd_recover(config: ExperimentConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    truth_path = _truth_path(config)
    if not truth_path.exists():
        raise FileNotFoundError(
            f"{truth_path} not found; run 'generate' first or set the 'truth' key"
        )
    seeds = config.trial_seeds()
    tasks = [(config, str(truth_path), str(out), s) for s in seeds]
    workers = _max_workers(len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_recover_trial, tasks))
    else:
        results = [_recover_trial(t) for t in tasks]
    results.sort(key=lambda r: seeds.index(r["seed"]))
    _append_metrics(out / "metrics.csv", [r["row"] for r in results])
    files = {f"trial_{r['seed']}_{k}": v for r in results for k, v in r["files"].items()}
    files["metrics"] = "metrics.csv"
    diverged = [r["seed"] for r in results if r["diverged"]]
    _write_manifest(
        out, "recover", config, seeds, files,
        extra={"loss_kind": results[0]["loss_kind"], "diverged": diverged},
    )
    for r in results:
        print(r["row"] + ("  [diverged]" if r["diverged"] else ""))
    if diverged and len(diverged) == len(seeds):
        print("all trials diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_evaluate(config: ExperimentConfig, truth_file: str, estimate_file: str) -> int:
    truth = core.tensor_read(truth_file)
    estimate = core.tensor_read(estimate_file)
    ssim = analysis.ssim_log_avg(truth, estimate, config.a_offset)
    nmse_val = analysis.nmse(truth, estimate)
    print(f"ssim={ssim!r} nmse={nmse_val!r}")
    if config.out:
        row = f"evaluate,{config.seed},{Path(estimate_file).stem},{ssim!r},{nmse_val!r},0.000"
        _append_metrics(Path(config.out) / "metrics.csv", [row])
    return EXIT_OK


_BOUND_KEYS = ("R", "K", "D0", "L", "W", "s", "b", "a", "kappa", "gamma",
               "P", "epsilon", "N", "delta", "nu")
_BOUND_INT = {"R", "K", "D0", "L", "W", "N"}


def cmd_bound(params_file: str, out_dir: str) -> int:
    """Evaluate the bound calculators over a parameter grid, one CSV row each."""
    grid: dict[str, list] = {}
    for key, raw in parse_config_file(params_file):
        if key not in _BOUND_KEYS:
            raise ConfigError(f"unknown bound parameter {key!r} (expected one of {_BOUND_KEYS})")
        if key in grid:
            raise ConfigError(f"duplicate bound parameter {key!r}")
        caster = int if key in _BOUND_INT else float
        grid[key] = [caster(x) for x in raw.split(",")]
    for key in _BOUND_KEYS:
        grid.setdefault(key, [getattr(analysis.BoundParams(), key)])
    total = int(np.prod([len(v) for v in grid.values()]))
    if total > 100_000:
        raise ConfigError(f"bound grid has {total} points; cap is 100000")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bounds.csv"
    header = ",".join(_BOUND_KEYS) + ",cover_H,cover_Xunn,fp_term1,fp_term2,q_term1,q_term2,error"
    n_err = 0
    with open(path, "w", encoding="ascii") as fh:
        fh.write(header + "\n")
        for combo in itertools.product(*(grid[k] for k in _BOUND_KEYS)):
            prefix = ",".join(str(v) for v in combo)
            try:
                p = analysis.BoundParams(**dict(zip(_BOUND_KEYS, combo)))
                ch = analysis.cover_bound_H(p)
                cx = analysis.cover_bound_Xunn(p)
                fp = analysis.prop_bound_terms(p, quantized=False)
                q = analysis.prop_bound_terms(p, quantized=True)
                fh.write(f"{prefix},{ch!r},{cx!r},{fp.term1!r},{fp.term2!r},{q.term1!r},{q.term2!r},\n")
            except (InvalidArgumentError, analysis.BoundDomainError) as exc:
                n_err += 1
                fh.write(f"{prefix},,,,,,,{str(exc).replace(',', ';')}\n")
    print(f"wrote {total} bound rows to {path} ({n_err} domain errors)")
    return EXIT_OK


def cmd_sweep(raw_items: list[tuple[str, str]], args) -> int:
    """Cartesian product over comma-listed sweepable keys; recover each point.

    Sweepable keys: those marked in the schema (R, Xc, eta, rho, B, method,
    Rhat). Each grid point gets its own subdirectory with a generated truth,
    and all metric rows are mirrored into the top-level metrics.csv.
    """
    sweep_axes: list[tuple[str, list[str]]] = []
    base_items: list[tuple[str, str]] = []
    for key, raw in raw_items:
        if key in SCHEMA and SCHEMA[key][2] and "," in raw:
            sweep_axes.append((key, [x.strip() for x in raw.split(",")]))
        else:
            base_items.append((key, raw))
    base = _apply_flag_overrides(ExperimentConfig.from_items(base_items), args)
    if base.truth:
        raise ConfigError("sweep manages truth per grid point; drop the 'truth' key")
    out = Path(base.out)
    combos = list(itertools.product(*(vals for _, vals in sweep_axes))) or [()]
    print(f"sweep: {len(combos)} grid point(s), keys {[k for k, _ in sweep_axes]}")
    exit_code = EXIT_OK
    for combo in combos:
        items = base_items + [(k, v) for (k, _), v in zip(sweep_axes, combo)]
        point = _apply_flag_overrides(ExperimentConfig.from_items(items), args)
        point_out = out / (point.scenario_tag() + f"_{point.method}")
        point = point.with_overrides(out=str(point_out), truth="")
        if not (point_out / "truth.rmt").exists():
            cmd_generate(point)
        code = cmd_recover(point)
        exit_code = max(exit_code, code)
        metrics = (point_out / "metrics.csv").read_text().splitlines()[1:]
        _append_metrics(out / "metrics.csv", metrics)
    _write_manifest(out, "sweep", base, base.trial_seeds(), {"metrics": "metrics.csv"})
    return exit_code


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rmcarto",
        description="Spectrum cartography experiments: synthetic maps, sparse or "
        "quantized sampling, decoder-based recovery, baselines, and bound reports.",
        epilog="config keys:\n" + KEY_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file or a manifest.json")
    common.add_argument("--seed", type=int, help="override the seed key")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--method", help="override the recovery method")
    common.add_argument("--quantized", type=int, metavar="B",
                        help="override the quantizer bit depth (0 = full precision)")
    common.add_argument("--trials", type=int, help="override the trial count")

    sub.add_parser("generate", parents=[common], help="synthesize a ground-truth scenario")
    sub.add_parser("sample", parents=[common], help="draw masks and sensor payloads")
    sub.add_parser("recover", parents=[common], help="sample, recover, and evaluate trials")
    ev = sub.add_parser("evaluate", parents=[common], help="score an estimate against a truth")
    ev.add_argument("--truth-file", required=True)
    ev.add_argument("--estimate-file", required=True)
    bd = sub.add_parser("bound", parents=[common], help="evaluate bound calculators on a grid")
    bd.add_argument("--params", required=True, help="key=value grid file (comma lists allowed)")
    sub.add_parser("sweep", parents=[common], help="grid of scenarios x methods")
    return parser


def _apply_flag_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.method is not None:
        overrides["method"] = _parse_method(args.method)
    if args.quantized is not None:
        overrides["B"] = args.quantized
    if args.trials is not None:
        overrides["trials"] = args.trials
        overrides["seeds"] = ()
    return config.with_overrides(**overrides)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "sweep":
            if args.config and str(args.config).endswith(".json"):
                raise ConfigError("sweep takes a key=value config file, not a manifest")
            raw_items = parse_config_file(args.config) if args.config else []
            return cmd_sweep(raw_items, args)
        config, manifest = _load_config(args.config)
        config = _apply_flag_overrides(config, args)
        if manifest is not None and args.seed is None and args.trials is None:
            seeds = tuple(int(s) for s in manifest.get("seeds", ()))
            if seeds:
                config = config.with_overrides(seeds=seeds)
        if args.command == "generate":
            return cmd_generate(config)
        if args.command == "sample":
            return cmd_sample(config)
        if args.command == "recover":
            return cmd_recover(config)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.truth_file, args.estimate_file)
        if args.command == "bound":
            return cmd_bound(args.params, config.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, core.TensorFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RmcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
