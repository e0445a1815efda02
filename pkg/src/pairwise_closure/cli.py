"""Command-line front door for the package.

Six subcommands cover the workflow end to end: ``design`` (sample size for a
target disjunctive power), ``critical-values`` (the per-subset closed-testing
table), ``analyze`` (closed test of observed arm means, single-analysis or
group-sequential), ``gs-boundaries`` (per-subset stopping boundaries),
``combine`` (inverse-normal combination of stage p-values), and ``simulate``
(operating characteristics of a scenario, or the canned reference table via
``--table1``).

Input is a JSON object, passed inline or as a file path through ``--input``.
Output is JSON (default) or CSV with six significant digits, written to
``--output`` or standard output.  Every JSON payload carries
``schema_version`` plus the seed and accuracy that produced it; a timestamp
field is added unless ``--deterministic`` is set, so deterministic runs are
byte-identical.  Validation problems exit with status 2 and a JSON error
object on standard error; numeric non-convergence exits with status 3.

The shared ``config`` object looks like::

    {"n_arms": 3, "sigma2": 1.0, "n": 100, "sided": "two-sided"}

with either ``n`` (one analysis) or cumulative ``stage_n`` rows (one per
analysis), and scalars broadcasting across arms.  A ``spending`` object is
``{"type": "pocock" | "obrien-fleming" | "power", "rho": 1.0}`` with
information times taken from the config unless given explicitly.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from datetime import datetime, timezone

from .closure import closed_test, critical_values, one_sided_closed_test
from .combination import CombinationWeights, combine
from .model import ONE_SIDED, TWO_SIDED, TrialConfig, z_statistics
from .mvn import DEFAULT_ACCURACY, NumericsError
from .power import MeanConfig, lfc, sample_size
from .sequential import (
    SpendingSchedule,
    StageData,
    generalised_boundaries,
    gs_boundaries,
    gs_closed_test,
)
from .simulate import SimScenario, run_scenario, table1_rows

SCHEMA_VERSION = "1"

_EXIT_OK = 0
_EXIT_VALIDATION = 2
_EXIT_NUMERICS = 3

_CONFIG_KEYS = {"n_arms", "sigma2", "n", "stage_n", "sided"}
_SIDED = {"two-sided": TWO_SIDED, "one-sided": ONE_SIDED}


class _InputError(ValueError):
    """A problem with the request itself rather than the numerics."""


def _load_input(raw: str | None, command: str) -> dict:
    if raw is None:
        raise _InputError(f"{command} needs --input (a JSON object or a file path)")
    text = raw.strip()
    if not text.startswith("{"):
        try:
            with open(raw, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as err:
            raise _InputError(f"cannot read input file: {err}") from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise _InputError(f"input is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise _InputError("input must be a JSON object")
    return data


def _require(data: dict, key: str, context: str):
    if key not in data:
        raise _InputError(f"{context} is missing the required key {key!r}")
    return data[key]


def _config_from(data: dict) -> TrialConfig:
    obj = _require(data, "config", "the request")
    if not isinstance(obj, dict):
        raise _InputError("config must be a JSON object")
    unknown = set(obj) - _CONFIG_KEYS
    if unknown:
        raise _InputError(f"unknown config keys {sorted(unknown)}")
    n_arms = _require(obj, "n_arms", "config")
    sigma2 = _require(obj, "sigma2", "config")
    sided = _SIDED.get(obj.get("sided", "two-sided"))
    if sided is None:
        raise _InputError("config.sided must be 'two-sided' or 'one-sided'")
    if ("n" in obj) == ("stage_n" in obj):
        raise _InputError("config needs exactly one of 'n' or 'stage_n'")
    try:
        if "n" in obj:
            return TrialConfig.single_stage(n_arms, sigma2, obj["n"], sided=sided)
        stage_n = [tuple(row) for row in obj["stage_n"]]
        base = TrialConfig.single_stage(n_arms, sigma2, stage_n[0], sided=sided)
        return base.with_stage_n(stage_n)
    except (TypeError, ValueError) as err:
        raise _InputError(f"invalid config: {err}") from err


def _spending_from(data: dict, config: TrialConfig, alpha: float, args) -> SpendingSchedule:
    obj = _require(data, "spending", "the request")
    if not isinstance(obj, dict):
        raise _InputError("spending must be a JSON object")
    kind = _require(obj, "type", "spending")
    times = tuple(obj.get("info_times", config.info_fractions()))
    try:
        if kind == "pocock":
            return SpendingSchedule.pocock(
                alpha, times, seed=args.seed, accuracy=_accuracy(args)
            )
        if kind == "obrien-fleming":
            return SpendingSchedule.obrien_fleming(alpha, times)
        if kind == "power":
            return SpendingSchedule.power_family(
                alpha, times, rho=float(obj.get("rho", 1.0))
            )
    except (TypeError, ValueError) as err:
        raise _InputError(f"invalid spending schedule: {err}") from err
    raise _InputError(
        "spending.type must be 'pocock', 'obrien-fleming', or 'power'"
    )


def _alpha_from(data: dict) -> float:
    alpha = data.get("alpha", 0.05)
    if not isinstance(alpha, (int, float)) or not 0.0 < alpha < 1.0:
        raise _InputError("alpha must lie strictly between 0 and 1")
    return float(alpha)


def _accuracy(args) -> float:
    return args.accuracy if args.accuracy is not None else DEFAULT_ACCURACY


def _threads(args) -> int:
    value = args.threads
    if value is None:
        env = os.environ.get("PAIRWISE_CLOSURE_THREADS")
        value = int(env) if env else 1
    if value < 1:
        raise _InputError("--threads must be at least 1")
    return value


def _subset_label(subset) -> str:
    return "+".join(str(k) for k in sorted(subset))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


# each handler returns (payload fields, csv header, csv rows)


def _cmd_design(data: dict, args) -> tuple[dict, list, list]:
    n_arms = _require(data, "n_arms", "the request")
    sigma2 = _require(data, "sigma2", "the request")
    alpha = _alpha_from(data)
    target = data.get("power", 0.9)
    if not 0.0 < target < 1.0:
        raise _InputError("power must lie strictly between 0 and 1")
    sided = _SIDED.get(data.get("sided", "two-sided"))
    if sided is None:
        raise _InputError("sided must be 'two-sided' or 'one-sided'")
    try:
        if "means" in data:
            means = MeanConfig(tuple(data["means"]), delta=data.get("delta"))
            if len(set(means.mu)) == 1:
                raise _InputError(
                    "all arm means are equal; no difference to power for"
                )
        else:
            means = lfc(int(n_arms), float(_require(data, "delta", "the request")))
        config = TrialConfig.single_stage(int(n_arms), sigma2, 2, sided=sided)
        result = sample_size(
            config,
            means,
            alpha=alpha,
            power_target=float(target),
            seed=args.seed,
            accuracy=_accuracy(args),
        )
    except (TypeError, ValueError) as err:
        if isinstance(err, _InputError):
            raise
        raise _InputError(str(err)) from err
    payload = {
        "means": list(means.mu),
        "alpha": alpha,
        "power_target": float(target),
        "n_total": result.n_total,
        "n_per_arm": list(result.n_per_arm),
        "power": result.power,
    }
    rows = [["n_total", result.n_total]]
    rows += [[f"n_arm_{i + 1}", n] for i, n in enumerate(result.n_per_arm)]
    rows += [["power", result.power], ["alpha", alpha]]
    return payload, ["quantity", "value"], rows


def _cmd_critical_values(data: dict, args) -> tuple[dict, list, list]:
    config = _config_from(data)
    alpha = _alpha_from(data)
    table = critical_values(
        config, alpha, seed=args.seed, accuracy=_accuracy(args)
    )
    entries = table.entries(threads=_threads(args))
    ordered = sorted(entries.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))
    payload = {
        "alpha": alpha,
        "n_comparisons": config.n_comparisons,
        "values": [
            {"subset": sorted(s), "critical_value": c} for s, c in ordered
        ],
    }
    rows = [[_subset_label(s), len(s), c] for s, c in ordered]
    return payload, ["subset", "size", "critical_value"], rows


def _cmd_analyze(data: dict, args) -> tuple[dict, list, list]:
    config = _config_from(data)
    alpha = _alpha_from(data)
    staged = "spending" in data
    if staged:
        schedule = _spending_from(data, config, alpha, args)
        cum_means = _require(data, "cum_means", "a staged analysis")
        bounds = gs_boundaries(
            config, schedule, seed=args.seed, accuracy=_accuracy(args)
        )
        try:
            stage_data = StageData.from_cumulative_means(config, cum_means)
        except (TypeError, ValueError) as err:
            raise _InputError(str(err)) from err
        decision = gs_closed_test(stage_data, bounds)
        z_final = stage_data.z_cum[-1]
    else:
        means = _require(data, "means", "the request")
        table = critical_values(
            config, alpha, seed=args.seed, accuracy=_accuracy(args)
        )
        try:
            stats = z_statistics(config, means, stage=config.n_stages)
        except (TypeError, ValueError) as err:
            raise _InputError(str(err)) from err
        test = closed_test if config.sided == TWO_SIDED else one_sided_closed_test
        decision = test(stats, table)
        z_final = [s.z for s in stats]
    comparisons = []
    for p, z in zip(config.pairs(), z_final):
        entry = {
            "comparison": p.k,
            "arm_i": p.i,
            "arm_j": p.j,
            "z": float(z),
            "rejected": bool(decision.rejected[p.k - 1]),
        }
        if decision.stopped_stage is not None:
            entry["stopped_stage"] = decision.stopped_stage[p.k - 1]
        comparisons.append(entry)
    payload = {
        "procedure": decision.procedure,
        "alpha": alpha,
        "any_rejected": any(decision.rejected),
        "rejected": decision.rejected_indices(),
        "comparisons": comparisons,
    }
    header = ["comparison", "arm_i", "arm_j", "z", "rejected"]
    if staged:
        header.append("stopped_stage")
    rows = [[c[h] for h in header] for c in comparisons]
    return payload, header, rows


def _cmd_gs_boundaries(data: dict, args) -> tuple[dict, list, list]:
    config = _config_from(data)
    alpha = _alpha_from(data)
    schedule = _spending_from(data, config, alpha, args)
    build = generalised_boundaries if data.get("generalised") else gs_boundaries
    bounds = build(config, schedule, seed=args.seed, accuracy=_accuracy(args))
    entries = bounds.entries()
    ordered = sorted(entries.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))
    payload = {
        "alpha": alpha,
        "generalised": bool(data.get("generalised")),
        "info_times": list(schedule.info_times),
        "cumulative_spend": list(schedule.per_stage),
        "values": [
            # an unreachable analysis (no error to spend) appears as null
            {
                "subset": sorted(s),
                "boundaries": [c if math.isfinite(c) else None for c in c_vec],
            }
            for s, c_vec in ordered
        ],
    }
    rows = [
        [_subset_label(s), stage + 1, c]
        for s, c_vec in ordered
        for stage, c in enumerate(c_vec)
    ]
    return payload, ["subset", "stage", "boundary"], rows


def _cmd_combine(data: dict, args) -> tuple[dict, list, list]:
    pvalues = _require(data, "p_values", "the request")
    if not isinstance(pvalues, list) or not pvalues:
        raise _InputError("p_values must be a nonempty list")
    weights = None
    if "weights" in data:
        try:
            weights = CombinationWeights(tuple(data["weights"]))
        except (TypeError, ValueError) as err:
            raise _InputError(f"invalid weights: {err}") from err
    try:
        combined = float(combine(pvalues, weights))
    except (TypeError, ValueError) as err:
        raise _InputError(str(err)) from err
    used = weights or CombinationWeights.equal(len(pvalues))
    payload = {
        "p_values": [float(p) for p in pvalues],
        "weights": list(used.weights),
        "combined_p": combined,
    }
    rows = [[f"p_{q + 1}", float(p)] for q, p in enumerate(pvalues)]
    rows += [[f"w_{q + 1}", w] for q, w in enumerate(used.weights)]
    rows.append(["combined_p", combined])
    return payload, ["quantity", "value"], rows


def _table1(data: dict, args) -> tuple[dict, list, list]:
    replicates = int(data.get("replicates", 100_000))
    if replicates < 1:
        raise _InputError("replicates must be at least 1")
    rows = table1_rows(seed=args.seed, replicates=replicates)
    payload = {"replicates": replicates, "rows": rows}
    header = ["means", "procedure", "any_reject"]
    header += [f"r{r}" for r in range(1, 7)]
    header.append("se_any")
    out = [
        [
            "(" + ",".join(f"{v:g}" for v in row["means"]) + ")",
            row["procedure"],
            row["any_reject"],
            *row["counts"],
            row["any_se"],
        ]
        for row in rows
    ]
    return payload, header, out


def _cmd_simulate(data: dict, args) -> tuple[dict, list, list]:
    if args.table1:
        return _table1(data, args)
    config = _config_from(data)
    alpha = _alpha_from(data)
    spending = None
    if "spending" in data:
        spending = _spending_from(data, config, alpha, args)
    weights = None
    if "weights" in data:
        try:
            weights = CombinationWeights(tuple(data["weights"]))
        except (TypeError, ValueError) as err:
            raise _InputError(f"invalid weights: {err}") from err
    try:
        scenario = SimScenario(
            config=config,
            means=MeanConfig(tuple(_require(data, "means", "the request"))),
            procedures=tuple(_require(data, "procedures", "the request")),
            replicates=int(data.get("replicates", 100_000)),
            seed=args.seed,
            spending=spending,
            weights=weights,
            alpha=alpha,
            accuracy=_accuracy(args),
        )
    except (TypeError, ValueError) as err:
        raise _InputError(str(err)) from err
    result = run_scenario(scenario)
    m = config.n_comparisons
    payload = {
        "alpha": alpha,
        "replicates": scenario.replicates,
        "procedures": {
            tag: {
                "any_reject": s.any_reject,
                "any_se": s.any_se,
                "per_count": list(s.per_count),
                "per_count_se": list(s.per_count_se),
                "mean_total_n": s.mean_total_n,
            }
            for tag, s in result.procedures.items()
        },
    }
    header = ["procedure", "any_reject", "any_se"]
    header += [f"r{r}" for r in range(m + 1)]
    header.append("mean_total_n")
    rows = [
        [tag, s.any_reject, s.any_se, *s.per_count, s.mean_total_n]
        for tag, s in result.procedures.items()
    ]
    return payload, header, rows


_COMMANDS = {
    "design": _cmd_design,
    "critical-values": _cmd_critical_values,
    "analyze": _cmd_analyze,
    "gs-boundaries": _cmd_gs_boundaries,
    "combine": _cmd_combine,
    "simulate": _cmd_simulate,
}

_HELP = {
    "design": "smallest sample size reaching a target disjunctive power",
    "critical-values": "closed-testing critical value for every subset",
    "analyze": "closed test of observed arm means",
    "gs-boundaries": "group-sequential boundaries per subset and stage",
    "combine": "inverse-normal combination of stage p-values",
    "simulate": "operating characteristics of a scenario",
}

# commands that run without --input
_OPTIONAL_INPUT = {"simulate"}


def _render_csv(header: list, rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _render_json(payload: dict) -> str:
    return json.dumps(payload, indent=2) + "\n"


def _emit(text: str, output: str | None) -> None:
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _error(status: int, kind: str, message: str) -> int:
    sys.stderr.write(
        json.dumps({"error": {"type": kind, "message": message}}) + "\n"
    )
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairwise-closure",
        description="Design and analysis of all-pairwise multi-arm experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--input", help="JSON object, inline or a file path")
        p.add_argument("--output", help="write the result here instead of stdout")
        p.add_argument(
            "--format", choices=("json", "csv"), default="json",
            help="output format (default json)",
        )
        p.add_argument("--seed", type=int, default=0)
        p.add_argument(
            "--accuracy", type=float, default=None,
            help=f"quadrature accuracy (default {DEFAULT_ACCURACY:g})",
        )
        p.add_argument(
            "--threads", type=int, default=None,
            help="worker bound for table enumeration "
            "(default $PAIRWISE_CLOSURE_THREADS or 1)",
        )
        p.add_argument(
            "--deterministic", action="store_true",
            help="omit the timestamp so identical runs are byte-identical",
        )
        if name == "simulate":
            p.add_argument(
                "--table1", action="store_true",
                help="run the canned four-arm reference comparison",
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = _COMMANDS[args.command]
    try:
        if args.input is None and args.command in _OPTIONAL_INPUT:
            data = {}
        else:
            data = _load_input(args.input, args.command)
        fields, header, rows = handler(data, args)
    except _InputError as err:
        return _error(_EXIT_VALIDATION, "validation", str(err))
    except NumericsError as err:
        return _error(_EXIT_NUMERICS, "numerics", str(err))
    except (TypeError, ValueError, KeyError) as err:
        return _error(_EXIT_VALIDATION, "validation", str(err))
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "seed": args.seed,
        "accuracy": _accuracy(args),
    }
    if not args.deterministic:
        payload["generated_at"] = datetime.now(timezone.utc).isoformat()
    payload.update(fields)
    text = (
        _render_csv(header, rows)
        if args.format == "csv"
        else _render_json(payload)
    )
    try:
        _emit(text, args.output)
    except OSError as err:
        return _error(_EXIT_VALIDATION, "io", f"cannot write output: {err}")
    return _EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
