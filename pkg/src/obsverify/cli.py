"""Command-line orchestration.

Subcommands: compile, simulate, estimate, dp, train, validate, bound,
report, plotdata.  Every run resolves one config file, writes a
resolved-config snapshot next to its artifacts, and uses generators
derived from the config seed.

Exit codes: 0 success, 2 config error, 3 verification failed
(certified bound below the property threshold), 4 internal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILED = 3
EXIT_INTERNAL = 4


class VerificationFailed(Exception):
    pass


def _pre_threads(argv):
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ[var] = str(n)
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="obsverify",
        description="verify observational properties of stochastic systems")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--threads", type=int, help="BLAS thread cap")

    sp = sub.add_parser("compile", help="compile the property formula to a DFA")
    common(sp)
    sp.add_argument("--formula", help="formula text (else the config property)")

    for name, desc in [
            ("simulate", "sample a trajectory and dump it as CSV"),
            ("estimate", "Monte Carlo satisfaction probability over an x0 scan"),
            ("dp", "grid dynamic-programming value table"),
            ("train", "train an MLP certificate"),
            ("validate", "dense-grid certificate validation"),
            ("bound", "certified probability lower bound"),
            ("report", "aggregate artifacts into a verdict")]:
        sp = sub.add_parser(name, help=desc)
        common(sp)

    sp = sub.add_parser("plotdata", help="CSV heatmap slice of a table/certificate")
    common(sp)
    sp.add_argument("--source", choices=["table", "certificate"], default="certificate")
    sp.add_argument("--t", type=int, default=0)
    sp.add_argument("--per-dim", type=int, default=101)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _pre_threads(argv)
    args = build_parser().parse_args(argv)
    from .config import ConfigError
    try:
        return _dispatch(args)
    except ConfigError as e:
        _emit_error("config", str(e))
        return EXIT_CONFIG
    except VerificationFailed as e:
        _emit_error("verification_failed", str(e))
        return EXIT_FAILED
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports, not raises
        from .ltlf import FormulaError
        if isinstance(e, FormulaError):
            _emit_error("formula", str(e))
            return EXIT_CONFIG
        _emit_error("internal", f"{type(e).__name__}: {e}")
        return EXIT_INTERNAL


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


class Context:
    """Everything a subcommand needs, resolved once."""

    def __init__(self, args):
        from . import config as config_mod
        if not args.config:
            raise config_mod.ConfigError("--config is required for this command")
        self.cfg = config_mod.load_config(args.config)
        if args.seed is not None:
            self.cfg.raw["seed"] = int(args.seed)
        if args.out is not None:
            self.cfg.raw["output"]["directory"] = args.out
        self.outdir = Path(self.cfg.raw["output"]["directory"])
        self.outdir.mkdir(parents=True, exist_ok=True)
        config_mod.write_snapshot(self.cfg, self.outdir)
        self.model = None
        self.spec = None
        self.vs = None

    def require_model(self):
        if self.model is None:
            self.model = self.cfg.build_model()
        return self.model

    def require_structure(self):
        if self.vs is None:
            from .product import VerificationStructure
            from .properties import to_formula
            model = self.require_model()
            self.spec = self.cfg.build_property()
            hf = to_formula(self.spec)
            acceptance = self.cfg.section("discretization")["acceptance"]
            self.vs = VerificationStructure.from_hyperformula(
                model, hf, acceptance=acceptance)
        return self.vs


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "compile":
        return cmd_compile(args)
    ctx = Context(args)
    return {
        "simulate": cmd_simulate,
        "estimate": cmd_estimate,
        "dp": cmd_dp,
        "train": cmd_train,
        "validate": cmd_validate,
        "bound": cmd_bound,
        "report": cmd_report,
        "plotdata": cmd_plotdata,
    }[cmd](ctx, args)


# ---------------------------------------------------------------------------


def cmd_compile(args) -> int:
    from .ltlf import compile_body, parse, pretty_hyper
    if args.formula:
        hf = parse(args.formula)
        outdir = Path(args.out) if args.out else None
    else:
        ctx = Context(args)
        from .properties import to_formula
        ctx.require_model()
        hf = to_formula(ctx.cfg.build_property())
        outdir = ctx.outdir
    dfa = compile_body(hf.body)
    text = f"formula: {pretty_hyper(hf)}\n{dfa.dump()}\n"
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "dfa.txt").write_text(text)
    sys.stdout.write(f"states: {dfa.n_states}\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(ctx: Context, args) -> int:
    import numpy as np
    from .system import child_rng
    model = ctx.require_model()
    rng = child_rng(ctx.cfg.seed, 0)
    x0 = model.initial.sample(rng, 1)[0]
    traj = model.sample_trajectory(x0, rng)
    ys = model.output_trace(traj)
    path = ctx.outdir / "trajectory.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        d_x, d_w, d_y = model.state_dim, model.disturbance_dim, model.output_dim
        wr.writerow(["t", *[f"x{i+1}" for i in range(d_x)],
                     *[f"w{i+1}" for i in range(d_w)],
                     *[f"y{i+1}" for i in range(d_y)]])
        for t in range(model.horizon + 1):
            wrow = (list(traj.disturbances[t]) if t < model.horizon
                    else [""] * d_w)
            wr.writerow([t, *traj.states[t], *wrow, *ys[t]])
    sys.stdout.write(f"wrote {path}\n")
    return EXIT_OK


def _x0_scan_points(model, n: int):
    import numpy as np
    pts = []
    for b in model.initial.boxes:
        if n == 1:
            pts.append(b.center()[None, :])
        else:
            pts.append(b.grid_points(n))
    return np.concatenate(pts, axis=0)


def cmd_estimate(ctx: Context, args) -> int:
    import numpy as np
    from .properties import (EstimatorConfig, ObserverGrid, empirical_probability,
                             state_estimate, INITIAL, CURRENT,
                             INITIAL_DETECT, INITIAL_OPACITY)
    from .system import child_rng
    model = ctx.require_model()
    spec = ctx.cfg.build_property()
    est = ctx.cfg.section("estimate")
    disc = ctx.cfg.section("discretization")
    estimator = EstimatorConfig(method=est["method"],
                                grid_cells_per_dim=disc["estimate_cells"],
                                w_points_per_dim=disc["estimate_w_points"],
                                companions=est["companions"])
    x0s = _x0_scan_points(model, est["x0_scan"])
    per_x0 = []
    for i, x0 in enumerate(x0s):
        rng = child_rng(ctx.cfg.seed, 10, i)
        rep = empirical_probability(model, spec, x0, est["samples"], rng,
                                    estimator=estimator)
        rep["x0"] = list(map(float, x0))
        per_x0.append(rep)
    worst = min(per_x0, key=lambda r: r["estimate"])
    doc = {
        "estimate": worst["estimate"],
        "ci_low": worst["ci_low"],
        "ci_high": worst["ci_high"],
        "n": worst["n"],
        "seed": ctx.cfg.seed,
        "settings": worst["settings"],
        "worst_x0": worst["x0"],
        "per_x0": per_x0,
    }
    (ctx.outdir / "probability.json").write_text(json.dumps(doc, indent=2))

    # diagnostic: dump the grid-observer estimate of one sampled trajectory
    if spec.kind != "custom":
        which = INITIAL if spec.kind in (INITIAL_DETECT, INITIAL_OPACITY) else CURRENT
        grid = ObserverGrid.build(model, disc["estimate_cells"],
                                  disc["estimate_w_points"])
        rng = child_rng(ctx.cfg.seed, 11)
        traj = model.sample_trajectory(x0s[0], rng)
        try:
            pset = state_estimate(model, traj, spec.eps, which, grid)
            with open(ctx.outdir / "estimate_points.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow([f"x{i+1}" for i in range(model.state_dim)])
                wr.writerows(pset.points.tolist())
        except Exception:
            pass  # diagnostics only
    sys.stdout.write(f"min estimate {doc['estimate']:.4f} "
                     f"[{doc['ci_low']:.4f}, {doc['ci_high']:.4f}]\n")
    return EXIT_OK


def cmd_dp(ctx: Context, args) -> int:
    import numpy as np
    from . import oracle
    from .interp import interpolate
    vs = ctx.require_structure()
    disc = ctx.cfg.section("discretization")
    grid = oracle.GridSpec.for_structure(
        vs, resolution=disc["dp_resolution"],
        w1_quad_per_dim=disc["w1_quadrature"],
        w2_candidates_per_dim=disc["w2_candidates"])
    table = oracle.dp_backward(vs, grid)
    oracle.write_table(ctx.outdir / "value_table.ovtb", table)

    x0s = _x0_scan_points(vs.model, ctx.cfg.section("discretization")["x0_scan"])
    axes = grid.axes1 + grid.axes2
    per = []
    for x0 in x0s:
        pts = np.concatenate([np.broadcast_to(x0, (x0s.shape[0], x0s.shape[1])),
                              x0s], axis=1)
        vals = interpolate(axes, table.values[0, vs.dfa.q0], pts)
        per.append(float(vals.min() if table.mode == oracle.INF_MODE else vals.max()))
    doc = {"mode": table.mode, "dp_value_overall": float(min(per)),
           "per_x0": per, "resolution": disc["dp_resolution"]}
    (ctx.outdir / "dp.json").write_text(json.dumps(doc, indent=2))
    sys.stdout.write(f"dp value (overall): {doc['dp_value_overall']:.4f}\n")
    return EXIT_OK


def cmd_train(ctx: Context, args) -> int:
    from . import certify, oracle, trainer
    vs = ctx.require_structure()
    tc = ctx.cfg.section("training")
    disc = ctx.cfg.section("discretization")
    warm = None
    if tc["warm_start"]:
        grid = oracle.GridSpec.for_structure(
            vs, resolution=min(disc["dp_resolution"], 121),
            w1_quad_per_dim=disc["w1_quadrature"],
            w2_candidates_per_dim=disc["w2_candidates"])
        warm = oracle.dp_backward(vs, grid)
    cfg = trainer.TrainConfig(
        epochs=tc["epochs"], dataset_size=tc["dataset_size"],
        batch_size=tc["batch_size"], lr=tc["lr"], lr_final=tc["lr_final"],
        momentum=tc["momentum"], lambda_term=tc["lambda_term"],
        lambda_rec=tc["lambda_rec"], lambda_beta=tc["lambda_beta"],
        n_adversary=tc["n_adversary"], m_inner=tc["m_inner"],
        seed=ctx.cfg.seed, beta_init=tc["beta_init"],
        hidden=tuple(tc["hidden"]), traj_fraction=tc["traj_fraction"],
        target_p=tc["target_p"] or None, eval_every=tc["eval_every"],
        eval_per_dim=tc["eval_per_dim"], early_stop=tc["early_stop"],
        warm_start_table=warm)
    result = trainer.train(vs, cfg)
    cert = result.certificate
    cert.meta["config_hash"] = ctx.cfg.config_hash()
    doc = certify.certificate_to_json(cert)
    (ctx.outdir / "certificate.json").write_text(json.dumps(doc, indent=2))
    with open(ctx.outdir / "training_log.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "L_total", "L_term", "L_rec", "L_beta", "beta",
                     "bound_estimate"])
        for row in result.log:
            wr.writerow([row["epoch"], row["L_total"], row["L_term"],
                         row["L_rec"], row["L_beta"], row["beta"],
                         "" if row["bound"] is None else row["bound"]])
    sys.stdout.write(
        f"trained {result.epochs_run} epochs; beta={cert.beta:.4f}; "
        f"certified={result.certified}; bound~{result.final_bound}\n")
    return EXIT_OK


def _load_certificate(ctx: Context):
    from . import certify, oracle
    path = ctx.outdir / "certificate.json"
    if not path.exists():
        raise VerificationFailed(f"no certificate at {path}; run `train` first")
    doc = json.loads(path.read_text())
    return certify.certificate_from_json(
        doc, blob_loader=lambda rel: oracle.read_table(ctx.outdir / rel))


def cmd_validate(ctx: Context, args) -> int:
    from . import certify
    vs = ctx.require_structure()
    cert = _load_certificate(ctx)
    disc = ctx.cfg.section("discretization")
    if disc["validate_inner"] == "mc":
        inner = certify.InnerRule.monte_carlo(disc["validate_mc_samples"],
                                              ctx.cfg.seed + 17)
    else:
        inner = certify.InnerRule.quadrature(vs.model, disc["w1_quadrature"])
    rep = certify.validate_dense(
        cert, vs, per_dim=disc["validate_per_dim"],
        w2_candidates_per_dim=disc["w2_candidates"],
        inner=inner, tol=disc["tolerance"])
    (ctx.outdir / "validation.json").write_text(rep.to_json())
    with open(ctx.outdir / "margins.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "worst_margin"])
        for t, mgn in sorted(rep.worst_by_t.items()):
            wr.writerow([t, mgn])
    total = rep.terminal_violations + rep.recursion_violations
    sys.stdout.write(f"violations: {total} (terminal {rep.terminal_violations}, "
                     f"recursion {rep.recursion_violations})\n")
    return EXIT_OK


def cmd_bound(ctx: Context, args) -> int:
    from . import certify
    vs = ctx.require_structure()
    cert = _load_certificate(ctx)
    disc = ctx.cfg.section("discretization")
    res = certify.bound(cert, vs, scan_per_dim=disc["x0_scan"])
    doc = {"overall": res["overall"], "alpha": res["alpha"], "beta": res["beta"],
           "mode": res["mode"], "x0_scan": disc["x0_scan"]}
    (ctx.outdir / "bound.json").write_text(json.dumps(doc, indent=2))
    with open(ctx.outdir / "bound_per_x0.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([*(f"x0_{i+1}" for i in range(vs.model.state_dim)), "bound"])
        for x0, b in zip(res["x0_points"], res["per_x0"]):
            wr.writerow([*x0, b])
    sys.stdout.write(f"overall bound: {res['overall']:.4f}\n")
    return EXIT_OK


def cmd_report(ctx: Context, args) -> int:
    ctx.require_model()
    spec = ctx.cfg.build_property()
    pieces = {}
    for name in ("probability", "dp", "validation", "bound"):
        path = ctx.outdir / f"{name}.json"
        pieces[name] = json.loads(path.read_text()) if path.exists() else None
    if pieces["bound"] is None or pieces["validation"] is None:
        raise VerificationFailed(
            "report needs bound.json and validation.json; run `train`, "
            "`validate` and `bound` first")
    clean = bool(pieces["validation"].get("clean"))
    bound_val = float(pieces["bound"]["overall"])
    satisfied = clean and bound_val >= spec.p
    doc = {
        "property": {"kind": spec.kind, "p": spec.p},
        "certificate_bound": bound_val,
        "validation_clean": clean,
        "empirical": None if pieces["probability"] is None else {
            "estimate": pieces["probability"]["estimate"],
            "ci_low": pieces["probability"]["ci_low"],
            "ci_high": pieces["probability"]["ci_high"],
            "advisory": True,
        },
        "dp_value": None if pieces["dp"] is None else pieces["dp"]["dp_value_overall"],
        "verdict": "SATISFIED" if satisfied else "FAILED",
    }
    (ctx.outdir / "report.json").write_text(json.dumps(doc, indent=2))
    sys.stdout.write(f"verdict: {doc['verdict']} "
                     f"(bound {bound_val:.4f} vs p {spec.p})\n")
    if not satisfied:
        raise VerificationFailed(
            f"certified bound {bound_val:.4f} < required p {spec.p}"
            if clean else "certificate validation reported violations")
    return EXIT_OK


def cmd_plotdata(ctx: Context, args) -> int:
    import numpy as np
    from . import certify, oracle
    vs = ctx.require_structure()
    model = vs.model
    if args.source == "table":
        path = ctx.outdir / "value_table.ovtb"
        if not path.exists():
            raise VerificationFailed(f"missing artifact {path}; run `dp` first")
        table = oracle.read_table(path)
        backing = certify.TableBacking(axes1=table.grid.axes1,
                                       axes2=table.grid.axes2,
                                       values=table.values)
        cert = certify.Certificate(
            backing=backing, alpha=1.0, beta=0.0,
            mode=certify.UNIVERSAL if table.mode == oracle.INF_MODE
            else certify.EXISTENTIAL,
            horizon=table.horizon)
    else:
        cert = _load_certificate(ctx)
    if model.state_dim != 1:
        raise VerificationFailed("plotdata slices need a 1-D state space")
    axis = np.linspace(model.domain.lo[0], model.domain.hi[0], args.per_dim)
    x1 = np.repeat(axis, args.per_dim)[:, None]
    x2 = np.tile(axis, args.per_dim)[:, None]
    vals = certify.eval_batch(cert, model, x1, x2, vs.dfa.q0, args.t)
    path = ctx.outdir / f"slice_t{args.t}.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x1", "x2", "value"])
        for a, b, v in zip(x1[:, 0], x2[:, 0], vals):
            wr.writerow([a, b, v])
    sys.stdout.write(f"wrote {path}\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
