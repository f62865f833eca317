"""Batch experiment harness.

A config is one JSON object with flat dotted keys, e.g.

    {"source.mixing": [[1, 1, 0], [0, 1, 1]], "source.alphas": [0.2, 0.3, 0.2],
     "seed": 7, "rho_x": 0.5, "rho_y": 0.7}

``mtamp <kind> --config cfg.json --out dir`` resolves every default, runs the
experiment, and writes a CSV plus ``manifest.json`` into ``dir``.
"""

import argparse
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from mtamp import __version__
from mtamp import coupling, mamp, se
from mtamp.source import SourceSpec, rid_summary

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

KINDS = ("rid", "se-sweep", "mamp-run", "coupled-run", "phase-boundary", "fresh-se-check")

REQUIRED = object()


def _default_grid():
    return [round(0.05 * i, 10) for i in range(1, 21)]


# field -> (default, kind of check)
COMMON = {
    "source.mixing": (REQUIRED, "matrix"),
    "source.alphas": (REQUIRED, "alphas"),
    "seed": (REQUIRED, "seed"),
    "output.dir": ("out", "str"),
    "threads": (1, "posint"),
}
MC = {
    "mc.samples": (100_000, "posint"),
    "mc.seed": (0, "seed"),
}
NOISE = {
    "noise.sigma2_x": (0.0, "nonneg"),
    "noise.sigma2_y": (0.0, "nonneg"),
}
COUPLING = {
    "coupling.L_c": (16, "posint"),
    "coupling.w": (2, "nonnegint"),
    "coupling.seed_blocks": (2, "nonnegint"),
    "coupling.seed_boost": (1.0, "pos"),
    "coupling.seed_rows": (2, "nonnegint"),
    "coupling.both_ends": (True, "bool"),
    "coupling.T": (400, "posint"),
    "coupling.threshold": (1e-4, "pos"),
}
FIELDS = {
    "rid": {},
    "se-sweep": {
        **MC, **NOISE,
        "grid.rho_x": (_default_grid(), "rates"),
        "grid.rho_y": (_default_grid(), "rates"),
        "se.tol": (1e-8, "pos"),
        "se.max_iter": (500, "posint"),
    },
    "mamp-run": {
        **MC, **NOISE,
        "rho_x": (REQUIRED, "rate"),
        "rho_y": (REQUIRED, "rate"),
        "n": (5000, "posint"),
        "runs": (1, "posint"),
        "mamp.iterations": (100, "posint"),
        "mamp.schedule": ("se", "schedule"),
        "mamp.stop_tol": (1e-8, "nonneg"),
    },
    "coupled-run": {
        **MC, **NOISE, **COUPLING,
        "delta_x": (REQUIRED, "pos"),
        "delta_y": (REQUIRED, "pos"),
        "coupling.N": (0, "nonnegint"),
        "coupling.schedule": ("empirical", "schedule"),
    },
    "phase-boundary": {
        **MC, **NOISE, **COUPLING,
        "coupling.L_c": (32, "posint"),
        "mc.samples": (20_000, "posint"),
        "boundary.delta_x": ([0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], "positives"),
        "boundary.lo": (0.05, "pos"),
        "boundary.hi": (1.0, "pos"),
        "boundary.tol": (0.005, "pos"),
    },
    "fresh-se-check": {
        **MC, **NOISE,
        "rho_x": (REQUIRED, "rate"),
        "rho_y": (REQUIRED, "rate"),
        "n": (1000, "posint"),
        "iterations": (15, "posint"),
    },
}


@dataclass(frozen=True)
class Diagnostic:
    field: str
    message: str

    def as_dict(self):
        return {"field": self.field, "message": self.message}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    values: dict  # every field, defaults filled in

    def __getitem__(self, key):
        return self.values[key]

    @property
    def spec(self):
        return SourceSpec(self.values["source.mixing"], self.values["source.alphas"])

    @property
    def mc(self):
        return se.MonteCarlo(self.values["mc.samples"], self.values["mc.seed"])

    def to_dict(self):
        return {"kind": self.kind, **self.values}


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _check(kind, v):
    """Return an error message, or None if ``v`` is acceptable."""
    if kind == "bool":
        return None if isinstance(v, bool) else "must be true or false"
    if kind == "str":
        return None if isinstance(v, str) and v else "must be a nonempty string"
    if kind == "seed":
        return None if _is_int(v) and v >= 0 else "must be a non-negative integer"
    if kind == "posint":
        return None if _is_int(v) and v > 0 else "must be a positive integer"
    if kind == "nonnegint":
        return None if _is_int(v) and v >= 0 else "must be a non-negative integer"
    if kind == "pos":
        return None if _is_num(v) and v > 0 else "must be a positive number"
    if kind == "nonneg":
        return None if _is_num(v) and v >= 0 else "must be a non-negative number"
    if kind == "rate":
        return None if _is_num(v) and 0 < v <= 1 else f"out of range: {v!r} is not in (0, 1]"
    if kind == "rates":
        if not isinstance(v, list) or not v:
            return "must be a nonempty list"
        bad = [r for r in v if not (_is_num(r) and 0 < r <= 1)]
        return f"out of range: {bad[0]!r} is not in (0, 1]" if bad else None
    if kind == "positives":
        if not isinstance(v, list) or not v:
            return "must be a nonempty list"
        return None if all(_is_num(r) and r > 0 for r in v) else "entries must be positive numbers"
    if kind == "schedule":
        return None if v in ("se", "empirical") else "must be 'se' or 'empirical'"
    if kind == "matrix":
        if not (isinstance(v, list) and v and all(isinstance(r, list) and r for r in v)):
            return "must be a nonempty list of rows"
        if len({len(r) for r in v}) != 1:
            return "rows must have equal length"
        if len(v) != 2:
            return "experiments need exactly two terminals (two rows)"
        if not all(_is_num(e) for r in v for e in r):
            return "entries must be finite numbers"
        if any(all(e == 0 for e in r) for r in v):
            return "has an all-zero row"
        return None
    if kind == "alphas":
        if not isinstance(v, list) or not v:
            return "must be a nonempty list"
        bad = [a for a in v if not (_is_num(a) and 0 < a <= 1)]
        return f"out of range: {bad[0]!r} is not in (0, 1]" if bad else None
    raise AssertionError(kind)


def validate_config(raw, kind=None):
    """Parse and resolve a config; returns ``(config, [])`` or ``(None, diagnostics)``.

    ``raw`` is JSON text or an already-parsed dict.  ``kind`` (from the
    command line) must agree with a ``kind`` key in the file if both exist.
    Never raises.
    """
    diags = []
    if isinstance(raw, (str, bytes)):
        try:
            data = json.loads(raw)
        except (ValueError, UnicodeDecodeError) as exc:
            return None, [Diagnostic("<file>", f"not valid JSON: {exc}")]
    else:
        data = raw
    if not isinstance(data, dict):
        return None, [Diagnostic("<file>", "top level must be a JSON object")]
    data = dict(data)
    file_kind = data.pop("kind", None)
    if kind is None:
        kind = file_kind
    elif file_kind is not None and file_kind != kind:
        diags.append(Diagnostic("kind", f"config says {file_kind!r} but {kind!r} was requested"))
    if kind not in KINDS:
        return None, diags + [Diagnostic("kind", f"must be one of {', '.join(KINDS)}, got {kind!r}")]
    fields = {**COMMON, **FIELDS[kind]}
    for key in sorted(set(data) - set(fields)):
        diags.append(Diagnostic(key, f"unknown field for kind {kind!r}"))
    values = {}
    for key, (default, check) in fields.items():
        if key in data:
            v = data[key]
            if check in ("pos", "nonneg", "rate") and _is_int(v):
                v = float(v)
            msg = _check(check, v)
            if msg:
                diags.append(Diagnostic(key, msg))
                continue
            values[key] = v
        elif default is REQUIRED:
            diags.append(Diagnostic(key, "missing required field"))
        else:
            values[key] = default
    if "source.mixing" in values and "source.alphas" in values:
        if len(values["source.alphas"]) != len(values["source.mixing"][0]):
            diags.append(Diagnostic("source.alphas", "needs one entry per column of source.mixing"))
    if kind in ("coupled-run", "phase-boundary") and not diags:
        try:
            _weight_from(values)
        except ValueError as exc:
            diags.append(Diagnostic("coupling", str(exc)))
    if kind == "phase-boundary" and not diags and values["boundary.lo"] >= values["boundary.hi"]:
        diags.append(Diagnostic("boundary.lo", "must be below boundary.hi"))
    if kind == "fresh-se-check" and values.get("n", 0) > 2000:
        diags.append(Diagnostic("n", "fresh-matrix check is limited to n <= 2000"))
    if diags:
        return None, diags
    return ExperimentConfig(kind, values), []


class NumericalFailure(RuntimeError):
    pass


def _atomic_write(path, write):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, obj):
    def w(p):
        with open(p, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    _atomic_write(path, w)


def _write_rows(path, header, rows):
    def w(p):
        with open(p, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_cell(v) for v in row) + "\n")
    _atomic_write(path, w)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return se.fmt(v)


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a, dtype=float))):
            raise NumericalFailure("non-finite values in results")


def _run_rid(cfg, out):
    d = rid_summary(cfg.spec)
    _write_rows(os.path.join(out, "rid.csv"), ("quantity", "value"), sorted(d.items()))
    return ["rid.csv"], {k: float(v) for k, v in d.items()}


def _run_se_sweep(cfg, out):
    v = cfg.values
    spec, mc = cfg.spec, cfg.mc
    pool = ThreadPoolExecutor(v["threads"]) if v["threads"] > 1 else None
    try:
        pts = se.rate_distortion_grid(spec, v["grid.rho_x"], v["grid.rho_y"], v["noise.sigma2_x"],
                                      v["noise.sigma2_y"], mc, v["se.tol"], v["se.max_iter"], executor=pool)
    finally:
        if pool:
            pool.shutdown()
    _finite([p.distortion for p in pts])
    _atomic_write(os.path.join(out, "se_sweep.csv"), lambda p: se.write_grid_csv(pts, p))
    return ["se_sweep.csv"], {"points": len(pts), "converged": sum(p.converged for p in pts)}


def run_seeds(cfg):
    """Per-run problem seeds derived from the master seed."""
    return [mamp.stream_seed(cfg["seed"], "run", i) for i in range(cfg.values.get("runs", 1))]


def _run_mamp(cfg, out):
    v = cfg.values
    spec, mc = cfg.spec, cfg.mc
    s2 = (v["noise.sigma2_x"], v["noise.sigma2_y"])
    iters = v["mamp.iterations"]
    rows = []
    finals = []
    seeds = run_seeds(cfg)
    for run, ps in enumerate(seeds):
        prob = mamp.make_problem(spec, v["n"], v["rho_x"], v["rho_y"], ps, s2)
        rx, ry = prob.A.rate, prob.B.rate
        overlay = se.se_trajectory(spec, rx, ry, s2[0], s2[1], iters + 1, mc)
        sched = overlay if v["mamp.schedule"] == "se" else "empirical"
        try:
            _, _, tr = mamp.mamp_run(prob.A, prob.B, prob.u, prob.v, spec, sched, iters, v["mamp.stop_tol"],
                                     s2, mc, truth=(prob.x, prob.y))
        except mamp.DivergenceError as exc:
            raise NumericalFailure(f"run {run}: {exc}") from exc
        for t in range(tr.iterations):
            rows.append((run, t + 1, tr.mse_x[t], tr.mse_y[t],
                         rx * (overlay[t + 1, 0] - s2[0]), ry * (overlay[t + 1, 1] - s2[1]),
                         tr.tau_x[t], tr.tau_y[t]))
        finals.append((tr.mse_x[-1], tr.mse_y[-1]))
    _finite([r[2:] for r in rows])
    header = ("run", "t", "mse_x", "mse_y", "se_mse_x", "se_mse_y", "tau_x", "tau_y")
    _write_rows(os.path.join(out, "mamp_run.csv"), header, rows)
    f = np.array(finals)
    return ["mamp_run.csv"], {"mean_final_mse_x": float(f[:, 0].mean()), "mean_final_mse_y": float(f[:, 1].mean()),
                              "run_seeds": seeds}


def _weight_from(v):
    return coupling.build_weight_matrix(v["coupling.L_c"], v["coupling.w"], v["coupling.seed_blocks"],
                                        v["coupling.seed_boost"], v["coupling.seed_rows"], v["coupling.both_ends"])


def _weight(cfg):
    return _weight_from(cfg.values)


def _run_coupled(cfg, out):
    v = cfg.values
    spec, mc, W = cfg.spec, cfg.mc, _weight(cfg)
    s2 = (v["noise.sigma2_x"], v["noise.sigma2_y"])
    states = coupling.coupled_se_run(spec, W, v["delta_x"], v["delta_y"], s2[0], s2[1], v["coupling.T"], mc)
    trace = None
    if v["coupling.N"] > 0:
        prob = coupling.make_coupled_problem(spec, W, v["coupling.N"], v["delta_x"], v["delta_y"], v["seed"], s2)
        try:
            phi = states if v["coupling.schedule"] == "se" else "empirical"
            _, _, trace = coupling.coupled_mamp_run(prob.A, prob.B, prob.u, prob.v, spec, phi,
                                                    max_iter=v["coupling.T"], stop_tol=0.0, truth=(prob.x, prob.y))
        except mamp.DivergenceError as exc:
            raise NumericalFailure(str(exc)) from exc
    _finite([s.psi_x for s in states[1:]], [s.psi_y for s in states[1:]])
    _atomic_write(os.path.join(out, "wave.csv"), lambda p: coupling.write_wave_csv(states, p, trace))
    last = states[-1]
    thr = v["coupling.threshold"]
    return ["wave.csv"], {"recovered_blocks_x": int(np.sum(last.psi_x < thr)),
                          "recovered_blocks_y": int(np.sum(last.psi_y < thr)),
                          "blocks": W.L_c}


def _run_boundary(cfg, out):
    v = cfg.values
    spec, mc, W = cfg.spec, cfg.mc, _weight(cfg)
    s2 = (v["noise.sigma2_x"], v["noise.sigma2_y"])

    def job(dx):
        return coupling.phase_boundary_search(spec, W, [dx], v["boundary.lo"], v["boundary.hi"], v["boundary.tol"],
                                              v["coupling.T"], mc, v["coupling.threshold"], s2)[0]

    grid = v["boundary.delta_x"]
    if v["threads"] > 1:
        with ThreadPoolExecutor(v["threads"]) as pool:
            pts = list(pool.map(job, grid))
    else:
        pts = [job(dx) for dx in grid]
    _atomic_write(os.path.join(out, "phase_boundary.csv"), lambda p: coupling.write_boundary_csv(pts, p))
    return ["phase_boundary.csv"], {
        "pentagon": coupling.pentagon(spec),
        "anomalies": [{"delta_x": p.delta_x, "note": p.anomaly} for p in pts if p.anomaly],
    }


def _run_fresh(cfg, out):
    v = cfg.values
    res = se.fresh_matrix_se_check(cfg.spec, v["rho_x"], v["rho_y"], v["n"], v["iterations"], v["seed"],
                                   v["noise.sigma2_x"], v["noise.sigma2_y"], cfg.mc)
    rows = [(r.iteration, r.empirical_tau_x, r.empirical_tau_y, r.se_tau_x, r.se_tau_y) for r in res]
    _finite([r[1:] for r in rows])
    _write_rows(os.path.join(out, "fresh_se_check.csv"),
                ("t", "empirical_tau_x", "empirical_tau_y", "se_tau_x", "se_tau_y"), rows)
    return ["fresh_se_check.csv"], {}


RUNNERS = {
    "rid": _run_rid,
    "se-sweep": _run_se_sweep,
    "mamp-run": _run_mamp,
    "coupled-run": _run_coupled,
    "phase-boundary": _run_boundary,
    "fresh-se-check": _run_fresh,
}


def run_experiment(config, out_dir=None):
    """Run a validated config; returns ``(exit_code, manifest)``.

    Numerical failures produce exit code 3 and an ``error.json`` record
    in the output directory instead of an exception.
    """
    out = out_dir or config["output.dir"]
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    manifest = {
        "config": config.to_dict(),
        "version": __version__,
        "seeds": {"seed": config["seed"], "mc.seed": config.values.get("mc.seed")},
    }
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            files, results = RUNNERS[config.kind](config, out)
    except (NumericalFailure, FloatingPointError) as exc:
        err = {"status": "numerical-failure", "kind": config.kind, "message": str(exc)}
        _write_json(os.path.join(out, "error.json"), err)
        return EXIT_NUMERICAL, err
    manifest.update(status="ok", outputs=files, results=results, wall_time_s=time.perf_counter() - t0)
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return EXIT_OK, manifest


def build_parser():
    p = argparse.ArgumentParser(prog="mtamp", description="Two-terminal AMP experiments.")
    sub = p.add_subparsers(dest="kind", required=True)
    for k in KINDS:
        sp = sub.add_parser(k)
        sp.add_argument("--config", required=True, help="JSON config with flat dotted keys")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--threads", type=int, help="worker threads for sweeps")
    return p


def _fail_config(diags):
    rec = {"status": "config-error", "diagnostics": [d.as_dict() for d in diags]}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return EXIT_CONFIG


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except OSError as exc:
        return _fail_config([Diagnostic("--config", str(exc))])
    except ValueError as exc:
        return _fail_config([Diagnostic("<file>", f"not valid JSON: {exc}")])
    if isinstance(raw, dict):
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.threads is not None:
            raw["threads"] = args.threads
        if args.out is not None:
            raw["output.dir"] = args.out
    cfg, diags = validate_config(raw, args.kind)
    if diags:
        return _fail_config(diags)
    code, info = run_experiment(cfg)
    if code != EXIT_OK:
        print(json.dumps(info, sort_keys=True), file=sys.stderr)
    else:
        print(os.path.join(cfg["output.dir"], "manifest.json"))
    return code


if __name__ == "__main__":
    sys.exit(main())
