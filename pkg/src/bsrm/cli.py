"""Config-driven command line interface.

Subcommands: simulate | verify | bench | decompose.  Flags: --config PATH
(filesystem path or the name of a packaged config), --set key=value
(repeatable dotted-path overrides with TOML-literal values), --workers N,
--out DIR.  Exit codes: 0 pass, 1 tolerance failure, 2 config or input
validation error, 3 runtime error.

All artifacts (manifests, reports) are deterministic functions of the
config: sorted-key JSON, no timestamps, counter-based RNG streams.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import multiprocessing
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .decomposition import NegativePurePower, PAIR_MODES, decompose
from .estimation import MomentAccumulator
from .simulator import (
    CostGuard,
    FieldSample,
    field_to_csv,
    generate_phase_tensors,
    simulate_fft,
    simulate_naive,
    write_field_file,
)
from .spectral_model import (
    GridSpec,
    SpectrumError,
    build_bispectrum_grid,
    build_power_grid,
    check_cutoff,
    target_moments,
    validate_symmetries,
)

__all__ = [
    "ConfigError",
    "load_config",
    "cmd_simulate",
    "cmd_verify",
    "cmd_bench",
    "cmd_decompose",
    "main",
]


class ConfigError(ValueError):
    """Invalid configuration; message lists precise field paths."""


_REQUIRED = object()

_SCHEMA = {
    "experiment": {
        "id": (str, ""),
    },
    "grid": {
        "d": (int, _REQUIRED),
        "N": ((int, list), _REQUIRED),
        "dkappa": ((int, float, list), _REQUIRED),
        "M": ((int, list), None),
        "quadrant": (bool, False),
        "epsilon": ((int, float), 0.01),
    },
    "spectrum": {
        "power": (str, _REQUIRED),
        "bispectrum": (str, "none"),
    },
    "run": {
        "order": (int, 3),
        "method": (str, "fft"),
        "mode": (str, "lexicographic"),
        "seed": (int, 0),
        "samples": (int, 1),
        "workers": (int, 1),
    },
    "output": {
        "dir": (str, "out"),
        "csv": (bool, False),
    },
    "verify": {
        "variance_rtol": ((int, float), 0.01),
        "skewness_atol": ((int, float), 0.02),
        "check_cutoff": (bool, False),
    },
    "bench": {
        "sweep": (list, None),
        "methods": (list, ["naive", "fft"]),
    },
}


def _packaged_config(name: str) -> Path | None:
    base = Path(__file__).parent / "configs"
    for candidate in (name, f"{name}.toml"):
        path = base / candidate
        if path.is_file():
            return path
    return None


def load_config(source) -> dict:
    """Read a TOML config from a path or a packaged config name."""
    path = Path(source)
    if not path.is_file():
        packaged = _packaged_config(str(source))
        if packaged is None:
            raise ConfigError(f"config not found: {source}")
        path = packaged
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply repeated --set key=value entries (dotted paths, TOML values)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, text = item.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = tomllib.loads(f"v = {text}")["v"]
        except tomllib.TOMLDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-table value")
        node[parts[-1]] = value
    return raw


def validate_config(raw: dict) -> dict:
    """Normalize against the schema; reject unknown keys with field paths."""
    errors = []
    cfg = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    for section in raw:
        if section not in _SCHEMA:
            errors.append(f"unknown section [{section}]")
    for section, keys in _SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            errors.append(f"[{section}] must be a table")
            given = {}
        for key in given:
            if key not in keys:
                errors.append(f"unknown key {section}.{key}")
        out = {}
        for key, (types, default) in keys.items():
            allowed = types if isinstance(types, tuple) else (types,)
            if key in given:
                value = given[key]
                if isinstance(value, bool) and bool not in allowed:
                    errors.append(f"{section}.{key}: expected {_type_name(types)},"
                                  f" got bool")
                elif not isinstance(value, types):
                    errors.append(f"{section}.{key}: expected {_type_name(types)},"
                                  f" got {type(value).__name__}")
                else:
                    out[key] = value
            elif default is _REQUIRED:
                errors.append(f"missing required key {section}.{key}")
            else:
                out[key] = default
        cfg[section] = out

    run = cfg.get("run", {})
    if run.get("method") not in (None, "fft", "naive"):
        errors.append("run.method: expected 'fft' or 'naive'")
    if run.get("mode") is not None and run["mode"] not in PAIR_MODES:
        errors.append(f"run.mode: expected one of {list(PAIR_MODES)}")
    if run.get("order") not in (None, 2, 3):
        errors.append("run.order: expected 2 or 3")
    if isinstance(run.get("samples"), int) and run["samples"] < 1:
        errors.append("run.samples: must be >= 1")
    if isinstance(run.get("workers"), int) and run["workers"] < 1:
        errors.append("run.workers: must be >= 1")
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def _type_name(types) -> str:
    if isinstance(types, tuple):
        return " or ".join(t.__name__ for t in types)
    return types.__name__


def _build_setup(cfg: dict):
    g = cfg["grid"]
    grid = GridSpec(d=g["d"], N=g["N"], dkappa=g["dkappa"], M=g["M"],
                    quadrant=g["quadrant"], epsilon=float(g["epsilon"]))
    power = build_power_grid(cfg["spectrum"]["power"], grid)
    bname = cfg["spectrum"]["bispectrum"]
    bisp = None if bname == "none" else build_bispectrum_grid(bname, grid)
    return grid, power, bisp


def _build_decomposition(cfg: dict, grid, power, bisp):
    order = cfg["run"]["order"]
    effective = None if order == 2 else bisp
    return decompose(power, effective, grid, mode=cfg["run"]["mode"])


def _simulator(cfg: dict):
    return simulate_naive if cfg["run"]["method"] == "naive" else simulate_fft


_WORKER_STATE: dict = {}


def _init_worker(state) -> None:
    _WORKER_STATE.update(state)


def _worker_sample(sample_index: int):
    s = _WORKER_STATE
    phases = generate_phase_tensors(s["seed"], sample_index, s["grid"])
    sample = s["simulate"](s["decomp"], phases, s["grid"], s["order"])
    return sample_index, sample.values


def _iter_samples(cfg, grid, decomp, workers: int):
    """Yield (sample_index, FieldSample) in index order."""
    run = cfg["run"]
    seed = run["seed"]
    count = run["samples"]
    simulate = _simulator(cfg)
    if workers <= 1:
        for idx in range(count):
            phases = generate_phase_tensors(seed, idx, grid)
            yield idx, simulate(decomp, phases, grid, run["order"])
        return
    state = {"seed": seed, "grid": grid, "decomp": decomp,
             "simulate": simulate, "order": run["order"]}
    try:
        ctx = multiprocessing.get_context("fork")
    except ValueError:
        ctx = multiprocessing.get_context()
    with concurrent.futures.ProcessPoolExecutor(
            max_workers=workers, mp_context=ctx,
            initializer=_init_worker, initargs=(state,)) as pool:
        for idx, values in pool.map(_worker_sample, range(count),
                                    chunksize=8):
            yield idx, FieldSample(grid=grid, values=values, seed=seed,
                                   sample_index=idx,
                                   method=cfg["run"]["method"],
                                   order=run["order"])


def _decomposition_summary(decomp) -> dict:
    return {
        "checksum": decomp.checksum(),
        "n_coefficients": decomp.n_coefficients,
        "clamped_count": decomp.clamped_count,
        "zero_denominator_count": decomp.zero_denominator_count,
        "reconstruction_max_error": decomp.reconstruction_max_error(),
        "mode": decomp.mode,
    }


def _targets_dict(targets) -> dict:
    return {
        "mean": targets.mean,
        "variance": targets.variance,
        "third_moment": targets.third_moment,
        "skewness": targets.skewness,
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def cmd_simulate(cfg: dict, out_dir=None, workers: int = 1) -> dict:
    """Generate K samples, write field files and the run manifest."""
    grid, power, bisp = _build_setup(cfg)
    decomp = _build_decomposition(cfg, grid, power, bisp)
    targets = target_moments(power, None if cfg["run"]["order"] == 2 else bisp,
                             grid, mode=cfg["run"]["mode"],
                             decomposition=decomp)
    out = Path(out_dir or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, sample in _iter_samples(cfg, grid, decomp, workers):
        name = f"field_{idx:06d}.fld"
        write_field_file(out / name, sample)
        digest = hashlib.sha256(sample.values.tobytes()).hexdigest()
        entries.append({"sample_index": idx, "seed": cfg["run"]["seed"],
                        "file": name, "sha256": digest})
        if cfg["output"]["csv"] and grid.d <= 2:
            field_to_csv(out / f"field_{idx:06d}.csv", sample)
    manifest = {
        "config": cfg,
        "decomposition": _decomposition_summary(decomp),
        "targets": _targets_dict(targets),
        "samples": entries,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_verify(cfg: dict, out_dir=None, workers: int = 1) -> dict:
    """Stream an ensemble, compare moments against exact targets."""
    grid, power, bisp = _build_setup(cfg)
    decomp = _build_decomposition(cfg, grid, power, bisp)
    order = cfg["run"]["order"]
    targets = target_moments(power, None if order == 2 else bisp, grid,
                             mode=cfg["run"]["mode"],
                             decomposition=decomp)
    count = cfg["run"]["samples"]
    if count == 1:
        print("warning: single-sample ensemble; skewness is reported but "
              "not judged", file=sys.stderr)
    acc = MomentAccumulator()
    for _, sample in _iter_samples(cfg, grid, decomp, workers):
        acc.add(sample)
    report = acc.finalize(targets)

    vtol = float(cfg["verify"]["variance_rtol"])
    stol = float(cfg["verify"]["skewness_atol"])
    var_err = report.variance_rel_error
    skew_err = report.skewness_abs_error
    var_pass = var_err is not None and var_err <= vtol
    judge_skew = count > 1
    skew_pass = (skew_err is not None and skew_err <= stol) if judge_skew \
        else None
    overall = bool(var_pass and (skew_pass is not False))

    symmetry = None
    if bisp is not None:
        rep = validate_symmetries(
            bisp, "quadrant" if grid.quadrant else "general")
        symmetry = {"mode": rep.mode, "n_checked": rep.n_checked,
                    "max_permutation": rep.max_permutation,
                    "max_signflip_real": rep.max_signflip_real,
                    "max_signflip_imag": rep.max_signflip_imag,
                    "max_quadrant_flip": rep.max_quadrant_flip,
                    "passes": rep.passes}
    cutoff = None
    if cfg["verify"]["check_cutoff"]:
        rep = check_cutoff(power, bisp, grid)
        cutoff = {"epsilon": rep.epsilon,
                  "power_fraction": rep.power_fraction,
                  "bispectrum_fraction": rep.bispectrum_fraction,
                  "method": rep.method, "passes": rep.passes}

    payload = {
        "config": cfg,
        "n_samples": report.n_samples,
        "targets": _targets_dict(targets),
        "estimates": {
            "mean": report.mean,
            "variance": report.variance,
            "third_central": report.third_central,
            "skewness": report.skewness,
            "cumulants": list(report.cumulants),
            "se_mean": report.se_mean,
            "se_variance": report.se_variance,
            "se_skewness": report.se_skewness,
        },
        "checks": {
            "variance": {"value": report.variance,
                         "target": targets.variance,
                         "rel_error": var_err, "rtol": vtol,
                         "pass": var_pass},
            "skewness": {"value": report.skewness,
                         "target": targets.skewness,
                         "abs_error": skew_err, "atol": stol,
                         "judged": judge_skew, "pass": skew_pass},
        },
        "decomposition": _decomposition_summary(decomp),
        "symmetry": symmetry,
        "cutoff": cutoff,
        "pass": overall,
    }
    out = Path(out_dir or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", payload)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "estimate", "target", "error",
                         "tolerance", "pass"])
        writer.writerow(["variance", report.variance, targets.variance,
                         var_err, vtol, var_pass])
        writer.writerow(["skewness", report.skewness, targets.skewness,
                         skew_err, stol,
                         skew_pass if judge_skew else "not-judged"])
    status = "pass" if overall else "FAIL"
    print(f"verify: variance {report.variance:.6g} vs {targets.variance:.6g}"
          f" (rel err {var_err:.3e}, rtol {vtol:g}); skewness "
          f"{report.skewness:.6g} vs {targets.skewness:.6g} -> {status}")
    return payload


def cmd_bench(cfg: dict, out_dir=None, workers: int = 1) -> list[dict]:
    """Time the synthesis methods over the configured sample-count sweep."""
    sweep = cfg["bench"]["sweep"]
    if not sweep or not all(isinstance(k, int) and k > 0 for k in sweep):
        raise ConfigError("bench.sweep: must be a non-empty list of positive "
                          "integers")
    methods = cfg["bench"]["methods"]
    if not methods or any(m not in ("naive", "fft") for m in methods):
        raise ConfigError("bench.methods: must be a non-empty subset of "
                          "['naive', 'fft']")
    grid, power, bisp = _build_setup(cfg)
    t0 = time.perf_counter()
    decomp = _build_decomposition(cfg, grid, power, bisp)
    setup_s = time.perf_counter() - t0
    seed = cfg["run"]["seed"]
    order = cfg["run"]["order"]
    rows = []
    for method in methods:
        simulate = simulate_naive if method == "naive" else simulate_fft
        for count in sweep:
            start = time.perf_counter()
            try:
                for idx in range(count):
                    phases = generate_phase_tensors(seed, idx, grid)
                    simulate(decomp, phases, grid, order)
            except CostGuard as exc:
                print(f"note: naive skipped at K={count}: {exc}",
                      file=sys.stderr)
                continue
            total = time.perf_counter() - start
            rows.append({"d": grid.d, "method": method, "K": count,
                         "setup_s": setup_s, "total_s": total,
                         "per_sample_s": total / count})
    out = Path(out_dir or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["d", "method", "K",
                                                "setup_s", "total_s",
                                                "per_sample_s"])
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"d={row['d']} method={row['method']:<5} K={row['K']:<6} "
              f"setup={row['setup_s']:.4f}s total={row['total_s']:.4f}s "
              f"per-sample={row['per_sample_s']:.6f}s")
    return rows


def cmd_decompose(cfg: dict, out_dir=None, workers: int = 1) -> dict:
    """Dump the decomposition: per-target CSV plus gated coefficient dump."""
    grid, power, bisp = _build_setup(cfg)
    decomp = _build_decomposition(cfg, grid, power, bisp)
    out = Path(out_dir or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    idx = grid.storage_indices
    s_flat = power.values.ravel()
    sp_flat = decomp.s_p.ravel()
    bsq_flat = decomp.sum_bsq.ravel()
    counts = np.zeros(idx.shape[0], dtype=np.int64)
    if decomp.n_coefficients:
        flat_t = decomp._flat_storage(decomp.tgt_idx)
        counts += np.bincount(flat_t, minlength=idx.shape[0])
    with open(out / "decomposition.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"n{k + 1}" for k in range(grid.d)]
                        + ["S", "S_p", "sum_bsq", "pairs"])
        for row in range(idx.shape[0]):
            writer.writerow(list(idx[row]) + [s_flat[row], sp_flat[row],
                                              bsq_flat[row], counts[row]])
    dumped = False
    if decomp.n_coefficients <= 10 ** 6:
        with open(out / "coefficients.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [f"n{k + 1}" for k in range(grid.d)]
                + [f"i{k + 1}" for k in range(grid.d)]
                + [f"j{k + 1}" for k in range(grid.d)] + ["b_p", "beta"])
            for row in range(decomp.n_coefficients):
                writer.writerow(list(decomp.tgt_idx[row])
                                + list(decomp.i_idx[row])
                                + list(decomp.j_idx[row])
                                + [decomp.b[row], decomp.beta[row]])
        dumped = True
    else:
        print(f"note: coefficient dump skipped "
              f"({decomp.n_coefficients} rows exceed the 10^6 gate)",
              file=sys.stderr)
    summary = _decomposition_summary(decomp)
    summary["coefficients_dumped"] = dumped
    print(f"decompose: {decomp.n_coefficients} coefficients, "
          f"reconstruction max error "
          f"{summary['reconstruction_max_error']:.3e}, "
          f"clamped {decomp.clamped_count}, "
          f"zero-denominator warnings {decomp.zero_denominator_count}")
    _write_json(out / "decomposition.json", summary)
    return summary


_COMMANDS = {
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "decompose": cmd_decompose,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bsrm",
        description="Simulation of third-order non-Gaussian random fields "
                    "from prescribed power spectra and bispectra.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("simulate", "generate samples and write field files"),
            ("verify", "run an ensemble and compare moments to targets"),
            ("bench", "time the naive and FFT paths over a sample sweep"),
            ("decompose", "dump the decomposition tables")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True,
                        help="TOML config path or packaged config name")
        sp.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="dotted-path config override (repeatable)")
        sp.add_argument("--workers", type=int, default=None,
                        help="parallel sample workers (default from config)")
        sp.add_argument("--out", default=None,
                        help="output directory (overrides [output] dir)")
    args = parser.parse_args(argv)
    try:
        raw = load_config(args.config)
        raw = apply_overrides(raw, args.overrides)
        cfg = validate_config(raw)
        workers = args.workers if args.workers is not None \
            else cfg["run"]["workers"]
        result = _COMMANDS[args.command](cfg, out_dir=args.out,
                                         workers=workers)
    except (ConfigError, SpectrumError, NegativePurePower) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CostGuard as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 3
    except Exception as exc:  # runtime failures map to exit code 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    if args.command == "verify" and not result["pass"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
