"""Experiment orchestration: config -> pipelines -> CSV/JSON artifacts.

Subcommands: topology, analyze, train, verify.  Exit codes: 0 success,
2 config error, 3 numerical error, 4 verification failure.  Every output
file embeds the resolved config and master seed, and identical seeds
produce bitwise-identical files.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import analysis, channel, consensus, flcore, topology, verify
from .channel import DegenerateLinkError, LinkBudget, PacketPlan
from .config import Config, ConfigError, load_config, parse_coords
from .consensus import SpectralConvergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY = 4


# ------------------------------------------------------------- formatting


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _meta_lines(cfg: Config, command: str) -> list[str]:
    lines = [f"# dflsim {command}"]
    lines += [f"# {key} = {val}" for key, val in cfg.resolved_items()]
    return lines


def _write_csv(path: str, cfg: Config, command: str, columns: list[str],
               rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        for line in _meta_lines(cfg, command):
            fh.write(line + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _write_json(path: str, cfg: Config, command: str, payload: dict) -> None:
    doc = {"tool": f"dflsim {command}",
           "config": dict(cfg.resolved_items()),
           **payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=_jsonable)
        fh.write("\n")


# --------------------------------------------------------------- builders


def build_topology(cfg: Config) -> topology.Topology:
    t = cfg.topology
    if t.coords:
        pts = parse_coords(t.coords)
        if len(pts) < t.n_devices:
            raise ConfigError("coords override provides fewer points than "
                              f"n_devices={t.n_devices}")
        topo = topology.Topology(t.n_devices, pts[: t.n_devices])
    else:
        if t.n_devices > len(topology.DEFAULT_COORDS):
            raise ConfigError(
                "n_devices exceeds the built-in coordinate table; "
                "provide topology.coords")
        topo = topology.from_table(t.n_devices)
    rng = np.random.default_rng([t.topology_seed, 0x0709])
    topo = topology.build_edges_by_density(topo, t.rho, rng)
    return topology.scale(topo, t.kappa)


def build_budget(cfg: Config) -> LinkBudget:
    c = cfg.channel
    fc = c.fc_mhz if c.path_loss_units == "mhz" else c.fc_mhz / 1000.0
    return LinkBudget(fc_mhz=fc, bandwidth_hz=c.bandwidth_hz,
                      tx_power_dbm=c.tx_power_dbm,
                      noise_psd_dbm_hz=c.noise_psd_dbm_hz,
                      modulation=c.modulation)


def build_analysis_plan(cfg: Config) -> PacketPlan:
    c = cfg.channel
    if c.elems_per_packet > 0:
        return PacketPlan(c.model_dim, c.elems_per_packet)
    return PacketPlan.from_packet_count(c.model_dim, c.n_packets)


# ------------------------------------------------------------ subcommands


def cmd_topology(cfg: Config, out_dir: str) -> int:
    topo = build_topology(cfg)
    path = os.path.join(out_dir, "topology.csv")
    rows = [[a, b, topo.distance(a, b)] for a, b in sorted(topo.edges)]
    _write_csv(path, cfg, "topology", ["src", "dst", "distance_m"], rows)
    print(f"topology: {topo.n_devices} devices, {len(topo.edges)} edges, "
          f"connected={topology.is_connected(topo)} -> {path}")
    return EXIT_OK


def _analysis_bundles(cfg: Config):
    topo = build_topology(cfg)
    plan = build_analysis_plan(cfg)
    chan = channel.build_channel_matrix(topo, build_budget(cfg), plan)
    alpha = consensus.optimal_alpha(topo)
    tau = chan.mean_edge_per(topo)
    a = cfg.analysis
    zetas = analysis.compute_zetas(a.mu, a.lipschitz, cfg.training.eta,
                                   cfg.training.local_iters, tau)
    bundles: dict[str, analysis.AnalysisBundle | None] = {}
    cmats: dict[str, consensus.ConsensusMatrix | None] = {}
    for mode, builder in (("unaware", consensus.build_unaware),
                          ("aware", consensus.build_aware)):
        try:
            cmat = (builder(topo, alpha) if mode == "unaware"
                    else builder(topo, chan, alpha))
        except DegenerateLinkError:
            bundles[mode] = None
            cmats[mode] = None
            continue
        bundles[mode] = analysis.run_analysis(
            cmat.c, chan.succ, zetas, a.p_max, mode, a.j_cap)
        cmats[mode] = cmat
    return topo, plan, chan, alpha, zetas, bundles, cmats


def cmd_analyze(cfg: Config, out_dir: str) -> int:
    topo, plan, chan, alpha, zetas, bundles, cmats = _analysis_bundles(cfg)
    mode = cfg.analysis.mode
    bundle = bundles[mode]
    if bundle is None:
        raise DegenerateLinkError(
            f"{mode} design unavailable: a link has zero success probability")

    sweep_path = os.path.join(out_dir, "phi_sweep.csv")
    cols = ["J", "phi", "phi_lower", "phi_upper", "norm_M1", "norm_M2",
            "norm_M3", "norm_M4", "norm_1NM1"]
    rows = [[r.j, r.phi, r.phi_lower, r.phi_upper, r.norm_m1, r.norm_m2,
             r.norm_m3, r.norm_m4, r.norm_1n_m1] for r in bundle.sweep]
    _write_csv(sweep_path, cfg, "analyze", cols, rows)

    summary = {}
    for m, b in bundles.items():
        if b is None:
            summary[m] = None
            continue
        summary[m] = {
            "j_star": b.j_star,
            "j_threshold": b.j_threshold,
            "threshold_capped": b.threshold_capped,
            "phi_at_j_star": b.sweep[b.j_star - 1].phi,
            "betas": None if b.betas is None else {
                f"beta{i}": getattr(b.betas, f"beta{i}") for i in range(1, 9)},
        }
    payload = {
        "mode": mode,
        "tau_eps": chan.mean_edge_per(topo),
        "alpha": alpha,
        "p_max": cfg.analysis.p_max,
        "zetas": {f"zeta{i}": getattr(zetas, f"zeta{i}") for i in range(1, 8)},
        "modes": summary,
        "n_packets": plan.n_packets,
        "bits_per_packet": plan.bits_per_packet,
    }
    _write_json(os.path.join(out_dir, "analysis.json"), cfg, "analyze", payload)

    # Channel and consensus exports for downstream tooling.
    _write_csv(os.path.join(out_dir, "T.csv"), cfg, "analyze",
               [f"d{j}" for j in range(topo.n_devices)],
               [list(row) for row in chan.succ])
    cmat = cmats[mode]
    _write_csv(os.path.join(out_dir, "C.csv"), cfg, "analyze",
               [f"d{j}" for j in range(topo.n_devices)],
               [list(row) for row in cmat.c])
    lam = consensus.laplacian_eigenvalues(topo)
    _write_json(os.path.join(out_dir, "alpha.json"), cfg, "analyze", {
        "alpha": alpha, "lambda_2": float(lam[1]),
        "lambda_max": float(lam[-1]),
        "consensus_gap": consensus.consensus_gap(cmat.effective(chan)
                                                 if mode == "aware" else cmat.c),
    })
    print(f"analyze[{mode}]: J*={bundle.j_star} "
          f"J_TH={bundle.j_threshold if bundle.j_threshold is not None else 'n/a'}"
          f"{' (capped)' if bundle.threshold_capped else ''} -> {sweep_path}")
    return EXIT_OK


def build_training_setup(cfg: Config) -> tuple[flcore.TrainingSetup, str, int]:
    tr = cfg.training
    topo = build_topology(cfg)
    devices, p, test_x, test_y = flcore.make_fleet_data(
        cfg.topology.n_devices, tr.data_seed)
    model_dim = flcore.N_CLASSES * flcore.FEATURE_DIM
    plan = PacketPlan(model_dim, tr.elems_per_packet)
    budget = build_budget(cfg)
    chan = channel.build_channel_matrix(topo, budget, plan)
    chan_whole = channel.build_channel_matrix(
        topo, budget, PacketPlan(model_dim, model_dim))
    alpha = consensus.optimal_alpha(topo)
    if tr.algorithm == "dfl_aware":
        cmat = consensus.build_aware(topo, chan, alpha)
    else:
        cmat = consensus.build_unaware(topo, alpha)

    omega_star = flcore.solve_global_optimum(devices, p, tr.lambda_reg)

    if tr.algorithm == "udfl":
        local_aggs = 1
    elif tr.local_aggs == "auto":
        if tr.algorithm not in ("dfl_unaware", "dfl_aware"):
            raise ConfigError("local_aggs='auto' applies to D-FL only")
        est = flcore.estimate_smoothness(
            devices, p, tr.lambda_reg, 100,
            np.random.default_rng([tr.data_seed, 0x5400]))
        zetas = analysis.compute_zetas(est.mu, est.lipschitz, tr.eta,
                                       tr.local_iters,
                                       chan.mean_edge_per(topo))
        mode = ("aware" if tr.algorithm == "dfl_aware" else "unaware")
        result = analysis.j_star(cmat.c, chan.succ, zetas, float(p.max()),
                                 mode, cfg.analysis.j_cap)
        local_aggs = result.j_star
    else:
        local_aggs = int(tr.local_aggs)

    setup = flcore.TrainingSetup(
        devices=devices, p=p, cmat=cmat, chan=chan, plan=plan,
        eta=tr.eta, local_iters=tr.local_iters, local_aggs=local_aggs,
        batch_size=tr.batch_size, lambda_reg=tr.lambda_reg,
        master_seed=tr.master_seed, omega_star=omega_star,
        test_features=test_x, test_labels=test_y, topo=topo,
        center_device=tr.center_device - 1,
        cfl_lossless_downlink=tr.cfl_lossless_downlink,
        chan_whole=chan_whole)
    return setup, tr.algorithm, local_aggs


def cmd_train(cfg: Config, out_dir: str) -> int:
    setup, algorithm, local_aggs = build_training_setup(cfg)
    n_dev = len(setup.devices)
    fleet = flcore.initial_fleet(n_dev, setup.p, setup.model_dim)
    rows: list[list] = []
    for _ in range(cfg.training.rounds):
        fleet, metrics = flcore.run_algorithm_round(fleet, setup, algorithm)
        mean_acc = metrics.mean_accuracy(setup.p)
        for n in range(n_dev):
            rows.append([metrics.t, n + 1, float(metrics.accuracy[n]),
                         metrics.delta_omega, float(metrics.bias_norms[n]),
                         mean_acc])
    path = os.path.join(out_dir, "metrics.csv")
    _write_csv(path, cfg, "train",
               ["t", "device", "accuracy", "delta_omega", "bias_norm",
                "mean_accuracy"], rows)
    print(f"train[{algorithm}] J={local_aggs}: {cfg.training.rounds} rounds, "
          f"final mean accuracy {rows[-1][5]:.4f} -> {path}")
    return EXIT_OK


def cmd_verify(cfg: Config, out_dir: str, literal_indexing: bool) -> int:
    v = cfg.verify
    reps_mean = max(v.replications, 1_000)
    reps_var = max(v.replications, 10_000)
    if v.replications < 10_000:
        print(f"warning: replications={v.replications} below the variance "
              f"check precondition; using {reps_var}", file=sys.stderr)

    checks = []
    failed = False
    for i in range(v.n_instances):
        inst = verify.random_instance(v.seed + i)
        rng = np.random.default_rng([v.seed, i, 0x77])
        w0 = verify.block_constant_state(inst.topo.n_devices, inst.plan, rng)
        c = inst.cmat_unaware.c
        for j in (1, 2, 5):
            rep_e = verify.mc_expectation_bias(
                c, inst.chan.succ, w0, inst.plan, j, reps_mean, v.seed + 17 * i + j)
            rep_v = verify.mc_variance(
                c, inst.chan.succ, w0, inst.plan, j, reps_var,
                v.seed + 29 * i + j)
            checks.append({
                "instance": i, "j": j, "kind": "expectation",
                "max_abs_z": rep_e.max_abs_z, "passed": rep_e.passed})
            checks.append({
                "instance": i, "j": j, "kind": "variance",
                "max_rel_error": rep_v.max_rel_error,
                "resolved_entries": rep_v.resolved_entries,
                "passed": rep_v.passed})
            failed = failed or not (rep_e.passed and rep_v.passed)
        if literal_indexing or i == 0:
            # Head-to-head demonstration: the printed-index variance
            # expression disagrees with simulation (logged, never gated).
            rep_lit = verify.mc_variance(
                c, inst.chan.succ, w0, inst.plan, 5, reps_var,
                v.seed + 29 * i + 5, literal_indexing=True)
            checks.append({
                "instance": i, "j": 5, "kind": "variance_literal_indexing",
                "max_rel_error": rep_lit.max_rel_error,
                "agrees_with_simulation": rep_lit.passed,
                "gated": False})

    bound_report = _verify_bound_check(cfg)
    failed = failed or not bound_report["passed"]

    payload = {"checks": checks, "one_round_bound": bound_report,
               "all_passed": not failed}
    path = os.path.join(out_dir, "verify_report.json")
    _write_json(path, cfg, "verify", payload)
    print(f"verify: {'PASS' if not failed else 'FAIL'} -> {path}")
    return EXIT_OK if not failed else EXIT_VERIFY


def _verify_bound_check(cfg: Config) -> dict:
    """One-round bound slack on a small error-free-ish desk instance."""
    tr = cfg.training
    devices, p, _, _ = flcore.make_fleet_data(5, tr.data_seed)
    topo = topology.from_table(5)
    topo = topology.build_edges_by_density(
        topo, 0.8, np.random.default_rng([cfg.verify.seed, 5]))
    topo = topology.scale(topo, 0.2)  # keeps zeta1 < 1
    model_dim = flcore.N_CLASSES * flcore.FEATURE_DIM
    plan = PacketPlan(model_dim, 40)
    chan = channel.build_channel_matrix(topo, LinkBudget(), plan)
    alpha = consensus.optimal_alpha(topo)
    cmat = consensus.build_unaware(topo, alpha)
    omega_star = flcore.solve_global_optimum(devices, p, tr.lambda_reg)
    setup = flcore.TrainingSetup(
        devices=devices, p=p, cmat=cmat, chan=chan, plan=plan,
        eta=min(tr.eta, 0.05), local_iters=tr.local_iters, local_aggs=3,
        batch_size=tr.batch_size, lambda_reg=tr.lambda_reg,
        master_seed=tr.master_seed, omega_star=omega_star, topo=topo)
    est = flcore.estimate_smoothness(
        devices, p, tr.lambda_reg, 100,
        np.random.default_rng([cfg.verify.seed, 0xE57]))
    report = verify.mc_one_round_bound(setup, est, 64, cfg.verify.seed)
    return {"zeta1": report.zeta1, "diverging": report.diverging,
            "empirical": report.empirical, "bound": report.bound,
            "slack_ratio": report.slack_ratio, "passed": report.passed}


# ------------------------------------------------------------------ main


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dflsim",
        description="Decentralized FL over lossy links: simulate, analyze, "
                    "pick the per-round aggregation count.")
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, help="override training.master_seed")
    parser.add_argument("--out", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("topology", help="generate the device graph")

    p_an = sub.add_parser("analyze", help="phi sweep and optimal J")
    p_an.add_argument("--mode", choices=("unaware", "aware"))
    p_an.add_argument("--kappa", type=float, help="override topology.kappa")
    p_an.add_argument("--j-cap", type=int, dest="j_cap")

    p_tr = sub.add_parser("train", help="run desk-scale training rounds")
    p_tr.add_argument("--algorithm",
                      choices=("dfl_unaware", "dfl_aware", "cfl", "udfl"))
    p_tr.add_argument("--center", type=int, help="1-based central aggregator")
    p_tr.add_argument("--local-aggs", dest="local_aggs",
                      help="aggregations per round, or 'auto'")
    p_tr.add_argument("--rounds", type=int)
    p_tr.add_argument("--kappa", type=float, help="override topology.kappa")

    p_ve = sub.add_parser("verify", help="Monte Carlo oracle checks")
    p_ve.add_argument("--replications", type=int)
    p_ve.add_argument("--instances", type=int)
    p_ve.add_argument("--literal-indexing", action="store_true",
                      help="demonstrate the printed-index variance variant "
                           "on every instance")
    return parser


def _apply_overrides(cfg: Config, args: argparse.Namespace) -> None:
    if args.seed is not None:
        cfg.training.master_seed = args.seed
    if args.command == "analyze":
        if args.mode:
            cfg.analysis.mode = args.mode
        if args.kappa is not None:
            cfg.topology.kappa = args.kappa
        if args.j_cap is not None:
            cfg.analysis.j_cap = args.j_cap
    elif args.command == "train":
        if args.algorithm:
            cfg.training.algorithm = args.algorithm
        if args.center is not None:
            cfg.training.center_device = args.center
        if args.local_aggs is not None:
            cfg.training.local_aggs = args.local_aggs
        if args.rounds is not None:
            cfg.training.rounds = args.rounds
        if args.kappa is not None:
            cfg.topology.kappa = args.kappa
    elif args.command == "verify":
        if args.replications is not None:
            cfg.verify.replications = args.replications
        if args.instances is not None:
            cfg.verify.n_instances = args.instances


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        if args.command == "train" and cfg.topology.kappa <= 0:
            raise ConfigError("kappa must be positive")
        os.makedirs(args.out, exist_ok=True)
        if args.command == "topology":
            return cmd_topology(cfg, args.out)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "verify":
            return cmd_verify(cfg, args.out, args.literal_indexing)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpectralConvergenceError, DegenerateLinkError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
