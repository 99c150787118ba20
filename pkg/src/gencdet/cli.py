"""Command-line front end: ``gencdet test``, ``gencdet simulate`` and ``gencdet train-generator``."""
from __future__ import annotations

import argparse
import datetime as _dt
import sys
from pathlib import Path

from . import classification, io, permutation, simulate
from .errors import GencdetError
from .mdn import MdnGenerator, MdnSpec
from .mdn import train as train_mdn

METHODS = {
    "gp": "gp-cdet",
    "gp-adaptive": "adaptive-gp-cdet",
    "gca-nn": "gca-cdet-nn",
    "gca-llr": "gca-cdet-llr",
}

HYPOTHESIS = "H0: the conditional law of the response given the covariates is the same in both samples"


def _alpha(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"alpha must be a number, got {text!r}") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _side(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"bin side must lie in (0, 1], got {value}")
    return value


def _widths(text: str) -> tuple:
    try:
        widths = tuple(int(w) for w in text.split(",") if w.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated integers, got {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError(f"widths must be positive, got {text!r}")
    return widths


def _add_roles(p: argparse.ArgumentParser) -> None:
    p.add_argument("--response", required=True, help="comma-separated response column names")
    p.add_argument("--covariates", required=True, help="comma-separated covariate column names")


def _add_generator_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--g-components", type=_positive_int, default=2, help="mixture components G (default 2)")
    p.add_argument("--hidden", type=_widths, default=(8, 4), help="generator hidden widths (default 8,4)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gencdet", description="Two-sample tests of conditional distributions.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="test whether two CSV samples share a conditional law")
    t.add_argument("data1", nargs="?", help="CSV used to train the generator (omit with --generator)")
    t.add_argument("data2", help="CSV holding the second sample")
    _add_roles(t)
    t.add_argument("--method", choices=sorted(METHODS), default="gca-nn")
    t.add_argument("--alpha", type=_alpha, default=0.05)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--n-perm", type=_positive_int, default=500, help="permutations for gp methods")
    t.add_argument("--bin-side", type=_side, default=None, help="bin side for gp (default from n2)")
    t.add_argument("--classifier-hidden", type=_widths, default=(32,))
    t.add_argument("--generator", help="load a trained generator instead of fitting one on data1")
    t.add_argument("--trim", action=argparse.BooleanOptionalAction, default=True, help="drop data2 rows outside data1's covariate box")
    t.add_argument("--out", help="write the key=value report here")
    _add_generator_opts(t)

    s = sub.add_parser("simulate", help="repeat a test on one of the built-in models")
    s.add_argument("--model", type=int, choices=sorted(simulate.MODEL_SETTINGS), required=True)
    s.add_argument("--regime", choices=("null", "alternative"), default="null")
    s.add_argument("--test", "--method", dest="test", default="gca-nn", help="gp, gp-adaptive, gca-nn, gca-llr, oracle-nn or oracle-llr")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--n1", type=_positive_int, default=1000)
    s.add_argument("--n2", type=_positive_int, default=1000)
    s.add_argument("--alpha", type=_alpha, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-perm", type=_positive_int, default=300)
    s.add_argument("--g-components", type=_positive_int, default=None, help="override the model's default G")
    s.add_argument("--trim", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--workers", type=_positive_int, default=1)
    s.add_argument("--out", help="write the table as CSV here; the seed ledger goes to <out>.ledger.csv")

    g = sub.add_parser("train-generator", help="fit a mixture density generator and save it")
    g.add_argument("data", help="training CSV")
    _add_roles(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="destination .npz file")
    _add_generator_opts(g)
    return parser


def _roles(args) -> io.ColumnRoles:
    split = lambda s: [c.strip() for c in s.split(",") if c.strip()]
    return io.ColumnRoles(split(args.response), split(args.covariates))


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def outcome_items(outcome) -> list:
    """Flatten a test outcome into ordered report pairs."""
    if isinstance(outcome, classification.AccTestOutcome):
        items = [
            ("statistic", outcome.statistic),
            ("e1_hat", outcome.e1_hat),
            ("e0_hat", outcome.e0_hat),
            ("critical_value", -outcome.z_alpha),
            ("rule", "reject if statistic < critical_value"),
            ("n_train_per_class", outcome.n_train_per_class),
            ("n_eval_per_class", outcome.n_eval_per_class),
        ]
    else:
        items = [
            ("statistic", outcome.u_stat),
            ("p_value", outcome.p_value),
            ("critical_value", outcome.critical_value),
            ("rule", "reject if p_value <= alpha"),
            ("n_permutations", outcome.n_permutations),
        ]
        if outcome.scales:
            items.append(("p_value_adjustment", f"bonferroni over {len(outcome.scales)} scales, smallest p shown"))
        items += [(f"grid_{k}", v) for k, v in outcome.grid.items()]
        for side, u, p, rej in outcome.scales:
            items.append((f"scale_{side!r}", f"u={u!r} p={p!r} reject={str(rej).lower()}"))
    items += sorted(outcome.extra.items())
    items.append(("decision", "reject" if outcome.reject else "fail to reject"))
    return items


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")


def cmd_test(args) -> int:
    roles = _roles(args)
    method = METHODS[args.method]
    if args.generator is None and args.data1 is None:
        raise GencdetError("give data1 or --generator")
    generator = MdnGenerator.load(args.generator) if args.generator else None
    data1 = io.load_table(args.data1, roles) if args.data1 else None
    data2 = io.load_table(args.data2, roles)
    n2_before, dropped = data2.n, 0
    if args.trim and data1 is not None:
        data2, dropped = simulate.trim_support(data2, data1)
    spec = None
    if data1 is not None and generator is None:
        spec = MdnSpec.build(data1.p, data1.d, args.g_components, args.hidden)
    if method == "gp-cdet":
        out = permutation.gp_cdet(data1, data2, args.alpha, args.bin_side, spec, args.n_perm, args.seed, generator=generator)
    elif method == "adaptive-gp-cdet":
        out = permutation.adaptive_gp_cdet(data1, data2, args.alpha, spec, args.n_perm, args.seed, generator=generator)
    else:
        clf = classification.ClassifierSpec.linear() if method.endswith("llr") else classification.ClassifierSpec(hidden_widths=args.classifier_hidden)
        out = classification.gca_cdet(data1, data2, args.alpha, spec, clf, args.seed, generator=generator)
    items = [
        ("test", method),
        ("hypothesis", HYPOTHESIS),
        ("alpha", args.alpha),
        ("seed", args.seed),
        ("n1", data1.n if data1 is not None else "n/a"),
        ("n2_before_trim", n2_before),
        ("n2_after_trim", data2.n),
        ("n2_dropped", dropped),
        ("p", data2.p),
        ("d", data2.d),
    ]
    items += outcome_items(out)
    items.append(("timestamp", _timestamp()))
    text = io.format_report(items)
    _emit(text, args.out)
    width = max(len(k) for k, _ in items)
    for k, v in items:
        print(f"{k:<{width}}  {v}")
    return 0


def cmd_simulate(args) -> int:
    spec = simulate.SimulationSpec(
        model=args.model,
        regime=args.regime,
        n1=args.n1,
        n2=args.n2,
        trials=args.trials,
        base_seed=args.seed,
        test=args.test,
        alpha=args.alpha,
        n_perm=args.n_perm,
        trim=args.trim,
        workers=args.workers,
        n_components=args.g_components,
    )
    table = simulate.run_trials(spec)
    sys.stdout.write(table.to_text())
    for rec in table.records:
        if rec.error:
            print(f"trial {rec.trial} failed: {rec.error}", file=sys.stderr)
    if args.out:
        Path(args.out).write_text(table.to_csv(), encoding="utf-8")
        Path(str(args.out) + ".ledger.csv").write_text(table.ledger_csv(), encoding="utf-8")
    return 0


def cmd_train_generator(args) -> int:
    data = io.load_table(args.data, _roles(args))
    spec = MdnSpec.build(data.p, data.d, args.g_components, args.hidden)
    gen = train_mdn(data, spec, seed=args.seed)
    gen.save(args.out)
    s = gen.summary
    print(f"trained on {data.n} rows: {s.epochs_run} epochs, best epoch {s.best_epoch}, validation NLL {s.best_validation_nll:.6f}")
    print(f"saved to {args.out}")
    return 0


COMMANDS = {"test": cmd_test, "simulate": cmd_simulate, "train-generator": cmd_train_generator}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (GencdetError, ValueError, OSError) as exc:
        print(f"gencdet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
