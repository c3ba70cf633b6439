"""Command-line entry point.

Subcommands: poison, train, eval, sweep, report, selftest. Exit codes:
0 success, 1 config error, 2 artifact error, 3 self-test failure.
"""

import argparse
import sys

from . import harness


def _add_common(parser):
    parser.add_argument("--config", default=None, help="experiment config file (INI sections)")
    parser.add_argument("--seed", type=int, action="append", default=None,
                        help="trial seed (repeatable)")
    parser.add_argument("--rho", type=float, default=None, help="poison ratio override")
    parser.add_argument("--defense", default=None, help="defense name override")
    parser.add_argument("--attack", action="append", default=None,
                        help="untargeted attack name (repeatable)")
    parser.add_argument("--r", type=float, default=None, help="selected-subset ratio override")
    parser.add_argument("--beta", type=float, default=None, help="noise bound override")
    parser.add_argument("--gamma", type=float, default=None, help="noise scaling override")
    parser.add_argument("--out", default="runs", help="output directory")


def _overrides(args) -> dict:
    return {
        "seeds": args.seed, "rho": args.rho, "defense": args.defense,
        "attacks": args.attack, "r": args.r, "beta": args.beta, "gamma": args.gamma,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="influencelab",
                                     description="poisoning/defense experiment driver")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("poison", help="build a poisoned dataset artifact")
    _add_common(p)

    p = sub.add_parser("train", help="train the configured defense per seed")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset artifact (.npz) or targeted dir")

    p = sub.add_parser("eval", help="evaluate persisted parameters")
    _add_common(p)
    p.add_argument("--params", required=True, help="trained parameter file")
    p.add_argument("--data", required=True, help="dataset artifact (.npz)")
    p.add_argument("--targets", default=None, help="targets artifact (optional)")

    p = sub.add_parser("sweep", help="sweep one hyperparameter axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")

    p = sub.add_parser("report", help="rebuild summary.csv from stored records")
    _add_common(p)

    p = sub.add_parser("selftest", help="run the built-in sanity checks")
    _add_common(p)
    return parser


def run_selftest() -> int:
    """Fast built-in checks of the numerical core; exit 3 on any failure."""
    import numpy as np

    from . import attacks, data, defenses, influence, nn

    failures = []

    def check(name, ok):
        print(f"selftest {name}: {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(0)
    spec = nn.ModelSpec((6, 5, 4), activation="tanh")
    params = nn.init_params(spec, rng)
    x = rng.uniform(0, 1, 6)
    g = nn.grad_params(params, x, 1)
    eps = 1e-6
    k = int(rng.integers(0, len(g)))
    e = np.zeros(len(g)); e[k] = eps
    fd = (nn.loss(params.replace(params.values + e), x, 1)
          - nn.loss(params.replace(params.values - e), x, 1)) / (2 * eps)
    check("gradient-fd", abs(g[k] - fd) <= 1e-6 * max(1.0, abs(fd)))

    convex = nn.init_params(nn.ModelSpec((6, 4)), rng)
    X = rng.uniform(0, 1, (30, 6)); y = rng.integers(0, 4, 30)
    v = influence.val_grad(convex, (X, y))
    s = influence.ihvp_exact(convex, (X, y), v, damping=0.1)
    hv = nn.hvp(convex, (X, y), s) + 0.1 * s
    check("ihvp-residual", np.linalg.norm(hv - v) <= 1e-8 * np.linalg.norm(v))

    victim = params
    z = nn.Example(x, 1)
    out = attacks.pgd_untargeted(victim, z, attacks.AttackBudget(xi=0.1, steps=5))
    check("pgd-constraints", np.abs(out.x - x).max() <= 0.1 + 1e-12
          and out.x.min() >= 0 and out.x.max() <= 1)

    blobs = data.synthetic_blobs(60, rng)
    trn, val, tst = data.split(blobs, 30, 15, 15, rng)
    check("split-disjoint", len(set(trn.origin_index) | set(val.origin_index)
                                | set(tst.origin_index)) == 60)

    cfg = defenses.HintConfig(epochs=2, pretrain_epochs=0, schedule=(), batch_size=16)
    p2 = defenses.sgd_train(cfg, trn, nn.init_params(nn.ModelSpec((16, 8, 3)), rng),
                            np.random.default_rng(1))
    check("train-runs", np.isfinite(p2.values).all())
    return 3 if failures else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return run_selftest()
        if args.command == "report":
            path = harness.cmd_report(args.out)
            print(path)
            return 0
        cfg = harness.load_config(args.config, _overrides(args))
        if args.command == "poison":
            print(harness.cmd_poison(cfg, args.out))
        elif args.command == "train":
            records = harness.cmd_train(cfg, args.data, args.out)
            for r in records:
                asr = "" if r["asr"] is None else f" asr={r['asr']:.3f}"
                print(f"{r['defense']} seed={r['seed']} acc={r['test_acc']:.4f}{asr}")
        elif args.command == "eval":
            rec = harness.cmd_eval(args.params, args.data, args.out, args.targets)
            asr = "" if rec["asr"] is None else f" asr={rec['asr']:.3f}"
            print(f"acc={rec['test_acc']:.4f}{asr}")
        elif args.command == "sweep":
            values = tuple(float(tok) for tok in args.values.split(","))
            print(harness.cmd_sweep(cfg, args.axis, values, args.out))
        return 0
    except harness.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except harness.ArtifactError as err:
        print(f"artifact error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
