"""Command-line entry point: configure, run, and report every check.

Exit codes: 0 all checks passed, 1 a check failed, 2 usage/config error.
Reports are JSON, curves are CSV; outputs contain no timestamps and all
randomness derives from the master seed (per-check streams are split with
spawn_seed), so a fixed seed reproduces every byte.  BLAS pools are pinned to
one thread while computing so results do not depend on the ambient thread
count.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checks, engine, model
from .linalg import (
    Projector,
    SpaceLabel,
    StateVector,
    Subspace,
    family_completeness_defect,
    family_orthogonality_defect,
    spawn_seed,
)

DEFAULT_SEED = 12345


class ConfigError(ValueError):
    """A malformed or invalid configuration (maps to exit code 2)."""


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, payload: object) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _check_keys(section: str, data: Mapping[str, object], allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as handle:
            data = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return data


def _parse_vector(space: SpaceLabel, raw: object, what: str) -> StateVector:
    if not isinstance(raw, list) or not all(
        isinstance(x, list) and len(x) == 2 for x in raw
    ):
        raise ConfigError(f"{what} must be a list of [re, im] pairs")
    amps = np.array([complex(re, im) for re, im in raw])
    if amps.shape[0] != space.dim:
        raise ConfigError(f"{what} must have length {space.dim}")
    norm = np.linalg.norm(amps)
    if norm == 0:
        raise ConfigError(f"{what} must be nonzero")
    return StateVector(space, amps / norm, normalized=True)


def _parse_family(
    space: SpaceLabel, raw: object, what: str
) -> dict[str, Projector]:
    if not isinstance(raw, dict) or not raw:
        raise ConfigError(f"{what} must be a nonempty object of label -> vectors")
    family: dict[str, Projector] = {}
    for label, vectors in raw.items():
        if not isinstance(vectors, list) or not vectors:
            raise ConfigError(f"{what}[{label!r}] must be a nonempty list of vectors")
        cols = [
            _parse_vector(space, v, f"{what}[{label!r}]").amplitudes for v in vectors
        ]
        try:
            sub = Subspace.span(space, cols)
        except ValueError as exc:
            raise ConfigError(f"{what}[{label!r}]: {exc}") from exc
        family[label] = Projector(space, sub.frame @ sub.frame.conj().T)
    if family_completeness_defect(family) > 1e-10:
        raise ConfigError(f"{what} does not sum to the identity")
    if family_orthogonality_defect(family) > 1e-10:
        raise ConfigError(f"{what} is not pairwise orthogonal")
    return family


def _default_qubit_collapse() -> tuple[StateVector, dict[str, Projector], dict[str, Projector]]:
    """psi = e0, first family along the computational axis, second along the
    diagonal axis (the two do not commute)."""
    space = SpaceLabel("qubit", 2)
    psi = StateVector(space, np.array([1.0, 0.0], dtype=complex), normalized=True)
    e0 = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex)
    e1 = np.array([[0.0, 0.0], [0.0, 1.0]], dtype=complex)
    plus = 0.5 * np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex)
    minus = 0.5 * np.array([[1.0, -1.0], [-1.0, 1.0]], dtype=complex)
    first = {"1": Projector(space, e0), "2": Projector(space, e1)}
    second = {"alpha": Projector(space, plus), "beta": Projector(space, minus)}
    return psi, first, second


# ---------------------------------------------------------------------------
# postulate-a


_POSTULATE_A_KEYS = {"seed", "trials", "micro_overlap", "experiment"}


def run_postulate_a(config: dict) -> checks.CheckReport:
    _check_keys("postulate-a config", config, _POSTULATE_A_KEYS)
    seed = int(config.get("seed", DEFAULT_SEED))
    trials = int(config.get("trials", 100))
    overlap = config.get("micro_overlap")

    if overlap is not None:
        # Deliberately non-orthogonal outcome pair: the evolution builder must
        # refuse to complete it into a unitary.
        overlap = float(overlap)
        space = SpaceLabel("s", 2)
        s1 = np.array([1.0, 0.0], dtype=complex)
        s2 = np.array([overlap, math.sqrt(1.0 - overlap**2)], dtype=complex)
        micro = model.Microsystem(
            space,
            {"1": Subspace(space, s1[:, None]), "2": Subspace(space, s2[:, None])},
            certify=False,
        )
        apparatus = model.build_apparatus(2, 4, spawn_seed(seed, "apparatus"))
        assembly = model.ExperimentAssembly([micro, apparatus])
        try:
            model.measurement_step(assembly, apparatus, micro)
        except model.UnitaryCompletionError as exc:
            return checks.CheckReport(
                "postulate-a",
                False,
                exc.defect,
                1e-10,
                {
                    "negative_control": True,
                    "micro_overlap": overlap,
                    "completion_defect": exc.defect,
                    "builder_rejected": True,
                },
            )
        return checks.CheckReport(
            "postulate-a",
            False,
            1.0,
            1e-10,
            {"negative_control": True, "builder_rejected": False},
        )

    layout = model.ExperimentLayout.from_dict(config.get("experiment", {})) if config.get(
        "experiment"
    ) else None
    if layout is not None:
        built = layout.build()
        micro, apparatus = built.micro, built.apparatus
    else:
        micro, apparatus = checks.default_closure_setup(seed)
    closure = checks.check_outcome_subspace_closure(micro, apparatus, trials, seed)

    a_labels = apparatus.outcome_labels
    pair = (
        micro.outcome_subspaces[a_labels[0]].random_member(spawn_seed(seed, "s", 0)),
        micro.outcome_subspaces[a_labels[1]].random_member(spawn_seed(seed, "s", 1)),
    )
    ready = apparatus.ready.subspace.random_member(spawn_seed(seed, "ready"))
    residual = checks.orthogonality_residual(
        pair, (a_labels[0], a_labels[1]), ready, apparatus
    )
    defect = max(closure.defect, residual.residual)
    return checks.CheckReport.from_defect(
        "postulate-a",
        defect,
        closure.tolerance,
        {
            "closure": closure.to_dict(),
            "orthogonality_residual": residual.residual,
            "apparatus_overlap": abs(residual.apparatus_overlap),
            "implied_micro_bound": residual.implied_micro_bound,
        },
    )


def cmd_postulate_a(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    report = run_postulate_a(config)
    payload = report.to_dict()
    if args.out:
        _write_json(Path(args.out) / "postulate_a.json", payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# born


def _parse_n_list(raw: str) -> list[int]:
    try:
        values = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--n-list must be comma-separated integers: {exc}") from exc
    if not values:
        raise ConfigError("--n-list must contain at least one repetition count")
    return values


def run_born(p: float, epsilon: float, n_list: Sequence[int]) -> tuple[list, dict]:
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"p must lie in [0, 1], got {p!r}")
    if not 0.0 < epsilon < 1.0:
        raise ConfigError(f"epsilon must lie in (0, 1), got {epsilon!r}")
    try:
        rows = checks.born_convergence_curve(p, epsilon, list(n_list))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    first_small = next((r.n for r in rows if r.chi_exact < 1e-6), None)
    summary = {
        "p": p,
        "epsilon": epsilon,
        "n_values": [r.n for r in rows],
        "first_n_below_1e-6": first_small,
        "all_below_bound": all(r.chi_exact <= r.bound for r in rows),
        "final_chi_exact": rows[-1].chi_exact,
        "final_bound": rows[-1].bound,
    }
    return rows, summary


def _curve_csv(rows: Sequence[checks.ConvergenceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "chi_exact", "hoeffding_bound"])
    for r in rows:
        writer.writerow([r.n, repr(r.chi_exact), repr(r.bound)])
    return buf.getvalue()


def cmd_born(args: argparse.Namespace) -> int:
    rows, summary = run_born(args.p, args.eps, _parse_n_list(args.n_list))
    out = Path(args.out) if args.out else None
    if out is not None:
        _atomic_write(out / "born_convergence.csv", _curve_csv(rows))
        _write_json(out / "born.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if summary["all_below_bound"] else 1


# ---------------------------------------------------------------------------
# collapse


_COLLAPSE_KEYS = {"seed", "psi", "first", "second", "samples", "dim"}


def run_collapse(config: dict, samples: int | None) -> tuple[checks.CheckReport, "engine.BranchLedger"]:
    _check_keys("collapse config", config, _COLLAPSE_KEYS)
    seed = int(config.get("seed", DEFAULT_SEED))
    if "psi" in config or "first" in config or "second" in config:
        if not {"psi", "first", "second"} <= set(config):
            raise ConfigError("custom collapse configs need psi, first, and second")
        dim = int(config.get("dim", 2))
        space = SpaceLabel("s", dim)
        psi = _parse_vector(space, config["psi"], "psi")
        first = _parse_family(space, config["first"], "first")
        second = _parse_family(space, config["second"], "second")
    else:
        psi, first, second = _default_qubit_collapse()

    ledger = engine.collapse_branch_ledger(psi, first, second)
    factorization = checks.conditional_factorization_check(psi, first, second)
    total_defect = abs(ledger.total_weight() - 1.0)
    marginal = ledger.marginal(0)
    marginal_defect = max(
        abs(marginal[lam] - proj.expectation(psi)) for lam, proj in first.items()
    )
    details: dict = {
        "weights": {",".join(b.outcomes): b.weight for b in ledger.branches},
        "total_weight": ledger.total_weight(),
        "factorization": factorization.to_dict(),
        "marginal_defect": marginal_defect,
    }
    defect = max(total_defect, marginal_defect, factorization.defect)
    if samples:
        freq = checks.sequential_frequency_check(
            psi, first, second, samples, spawn_seed(seed, "sampling")
        )
        details["frequencies"] = freq.to_dict()
        if not freq.passed:
            defect = max(defect, 1.0)
    return checks.CheckReport.from_defect("collapse", defect, 1e-10, details), ledger


def cmd_collapse(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    report, ledger = run_collapse(config, args.samples)
    payload = report.to_dict()
    if args.out:
        out = Path(args.out)
        _write_json(out / "collapse.json", payload)
        buf = io.StringIO()
        ledger.to_csv(buf)
        _atomic_write(out / "collapse_ledger.csv", buf.getvalue())
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# suite


def _suite_postulate_b(seed: int) -> checks.CheckReport:
    apparatus_seeds = [spawn_seed(seed, "apparatus", i) for i in range(5)]
    return checks.postulate_b_sweep(50, apparatus_seeds, seed)


def _suite_born_grid(seed: int) -> checks.CheckReport:
    report = checks.hoeffding_grid_check()
    extreme = checks.BornParams(0.5, 0.1, 10_000)
    chi_extreme = checks.chi_norm_exact(extreme)
    details = dict(report.details)
    details["chi_at_extreme"] = chi_extreme
    details["extreme_target"] = 1e-80
    defect = report.defect if chi_extreme < 1e-80 else max(report.defect, chi_extreme)
    return checks.CheckReport.from_defect("born-grid", defect, 0.0, details)


#: Repetition grid for the convergence study; brackets the regime where the
#: tail becomes eventually decreasing (n >= 2/eps^2 = 800 at eps = 0.05).
SUITE_CONVERGENCE_NS = (10, 20, 50, 100, 200, 400, 800, 1200, 1600, 2000, 3000, 4000, 5000)


def _suite_born_convergence(seed: int) -> tuple[checks.CheckReport, list]:
    p, eps = 0.3, 0.05
    rows = checks.born_convergence_curve(p, eps, SUITE_CONVERGENCE_NS)
    onset = 2.0 / eps**2
    tail = [r for r in rows if r.n >= onset]
    monotone = all(b.chi_exact < a.chi_exact for a, b in zip(tail, tail[1:]))
    first_small = next((r.n for r in rows if r.chi_exact < 1e-3), None)
    below_bound = all(r.chi_exact <= r.bound for r in rows)
    ok = monotone and below_bound and first_small is not None and first_small <= 5000
    return (
        checks.CheckReport(
            "born-convergence",
            ok,
            0.0 if ok else 1.0,
            0.5,
            {
                "p": p,
                "epsilon": eps,
                "monotone_after_onset": monotone,
                "onset_n": onset,
                "first_n_below_1e-3": first_small,
                "all_below_bound": below_bound,
            },
        ),
        rows,
    )


def _suite_cross_validate(seed: int) -> checks.CheckReport:
    config = engine.RepeatedMeasurementConfig(p=0.3, seed=spawn_seed(seed, "dense"))
    worst = 0.0
    dims = {}
    for n in (1, 2, 3):
        report = engine.cross_validate(config, n)
        worst = max(worst, report.max_discrepancy)
        dims[str(n)] = report.joint_dim
        if not report.multiplicity_match:
            worst = max(worst, 1.0)
    return checks.CheckReport.from_defect(
        "dense-vs-ledger", worst, 1e-9, {"p": config.p, "joint_dims": dims}
    )


def _suite_collapse(seed: int) -> checks.CheckReport:
    qubit_report, _ = run_collapse({"seed": seed}, samples=100_000)

    rank_profiles = [(1, 3), (2, 2), (3, 1), (1, 1, 2), (2, 1, 1), (1, 1, 1, 1)]
    worst = qubit_report.defect
    instances = 0
    for i in range(100):
        rng = np.random.default_rng(spawn_seed(seed, "instance", i))
        space = SpaceLabel("s", 4)
        ranks_a = rank_profiles[int(rng.integers(len(rank_profiles)))]
        ranks_b = rank_profiles[int(rng.integers(len(rank_profiles)))]
        labels_a = [str(j + 1) for j in range(len(ranks_a))]
        labels_b = [chr(ord("a") + j) for j in range(len(ranks_b))]
        first_i = checks.random_projector_family(
            space, ranks_a, labels_a, spawn_seed(seed, "family", i, "first")
        )
        second_i = checks.random_projector_family(
            space, ranks_b, labels_b, spawn_seed(seed, "family", i, "second")
        )
        z = rng.standard_normal(space.dim) + 1j * rng.standard_normal(space.dim)
        psi_i = StateVector(space, z / np.linalg.norm(z), normalized=True)
        ledger = engine.collapse_branch_ledger(psi_i, first_i, second_i)
        worst = max(worst, abs(ledger.total_weight() - 1.0))
        fact = checks.conditional_factorization_check(psi_i, first_i, second_i)
        worst = max(worst, fact.defect)
        instances += 1
    return checks.CheckReport.from_defect(
        "collapse",
        worst,
        1e-10,
        {"qubit": qubit_report.to_dict(), "random_instances": instances},
    )


def _overlap_histogram_csv(summaries: Sequence[checks.OverlapSummary]) -> str:
    """Scaled-overlap histogram rows (dim * |<u|v>|^2 binned on [0, 10])."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dim", "bin_lo", "bin_hi", "count"])
    for s in summaries:
        for lo, hi, count in zip(
            s.histogram_edges, s.histogram_edges[1:], s.histogram_counts
        ):
            writer.writerow([s.dim, repr(lo), repr(hi), count])
        writer.writerow([s.dim, repr(s.histogram_edges[-1]), "inf", s.histogram_overflow])
    return buf.getvalue()


def _suite_overlap(seed: int) -> tuple[checks.CheckReport, list[checks.OverlapSummary]]:
    dims = (64, 1024, 4096)
    summaries = [
        checks.overlap_statistics(d, 10_000, spawn_seed(seed, "overlap", d))
        for d in dims
    ]
    worst = 0.0
    for s in summaries:
        band = 3.0 * s.std_error
        worst = max(worst, abs(s.mean - s.expected_mean) - band)
    decreasing = all(b.mean < a.mean for a, b in zip(summaries, summaries[1:]))
    if not decreasing:
        worst = max(worst, 1.0)
    report = checks.CheckReport.from_defect(
        "generic-overlap",
        worst,
        0.0,
        {
            "dims": list(dims),
            "means": [s.mean for s in summaries],
            "expected": [s.expected_mean for s in summaries],
            "std_errors": [s.std_error for s in summaries],
            "strictly_decreasing": decreasing,
            "summaries": [s.to_dict() for s in summaries],
        },
    )
    return report, summaries


def _suite_negative_control(seed: int) -> checks.CheckReport:
    report = run_postulate_a({"seed": seed, "micro_overlap": 0.3})
    rejected = bool(report.details.get("builder_rejected")) and report.details.get(
        "completion_defect", 0.0
    ) > 1e-6
    return checks.CheckReport.from_defect(
        "postulate-a-negative-control",
        0.0 if rejected else 1.0,
        0.5,
        report.details,
    )


def cmd_suite(args: argparse.Namespace) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else DEFAULT_SEED

    reports: list[checks.CheckReport] = []

    report = run_postulate_a({"seed": spawn_seed(seed, "postulate-a")})
    _write_json(out / "postulate_a.json", report.to_dict())
    reports.append(report)

    report = _suite_negative_control(spawn_seed(seed, "negative-control"))
    _write_json(out / "postulate_a_negative_control.json", report.to_dict())
    reports.append(report)

    report = _suite_postulate_b(spawn_seed(seed, "postulate-b"))
    _write_json(out / "postulate_b.json", report.to_dict())
    reports.append(report)

    report = _suite_born_grid(spawn_seed(seed, "born-grid"))
    _write_json(out / "born_grid.json", report.to_dict())
    reports.append(report)

    report, rows = _suite_born_convergence(spawn_seed(seed, "born-convergence"))
    _write_json(out / "born_convergence.json", report.to_dict())
    _atomic_write(out / "born_convergence.csv", _curve_csv(rows))
    reports.append(report)

    report = _suite_cross_validate(spawn_seed(seed, "cross-validate"))
    _write_json(out / "cross_validate.json", report.to_dict())
    reports.append(report)

    report = _suite_collapse(spawn_seed(seed, "collapse"))
    _write_json(out / "collapse.json", report.to_dict())
    reports.append(report)

    report, summaries = _suite_overlap(spawn_seed(seed, "overlap"))
    _write_json(out / "overlap.json", report.to_dict())
    _atomic_write(out / "overlap_histogram.csv", _overlap_histogram_csv(summaries))
    reports.append(report)

    summary = {
        "seed": seed,
        "checks": {r.name: r.passed for r in reports},
        "all_passed": all(r.passed for r in reports),
    }
    _write_json(out / "summary.json", summary)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  defect={r.defect:.3e}")
    return 0 if summary["all_passed"] else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="postulatelab",
        description="Measurement-postulate verification suite on explicit "
        "finite-dimensional unitary models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_a = sub.add_parser("postulate-a", help="outcome-subspace closure and orthogonality")
    p_a.add_argument("--config", help="JSON config file")
    p_a.add_argument("--seed", type=int, default=None)
    p_a.add_argument("--out", help="directory for the JSON report")
    p_a.set_defaults(handler=cmd_postulate_a)

    p_b = sub.add_parser("born", help="exact frequency tails vs the exponential bound")
    p_b.add_argument("--p", type=float, required=True)
    p_b.add_argument("--eps", type=float, required=True)
    p_b.add_argument("--n-list", required=True, help="comma-separated repetition counts")
    p_b.add_argument("--out", help="directory for CSV + JSON outputs")
    p_b.set_defaults(handler=cmd_born)

    p_c = sub.add_parser("collapse", help="sequential-measurement branch weights")
    p_c.add_argument("--config", help="JSON config file")
    p_c.add_argument("--seed", type=int, default=None)
    p_c.add_argument("--samples", type=int, default=None, help="Monte Carlo samples")
    p_c.add_argument("--out", help="directory for JSON + ledger CSV")
    p_c.set_defaults(handler=cmd_collapse)

    p_s = sub.add_parser("suite", help="run every check and write a report per check")
    p_s.add_argument("--seed", type=int, default=None)
    p_s.add_argument("--out", required=True, help="output directory")
    p_s.set_defaults(handler=cmd_suite)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=1):
            return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
