"""Command line entry point: ``comatch run|sweep|audit-noise|grad-check``.

Errors are printed to stderr as one JSON object ``{"error": category,
"message": text}`` and the process exits with the category's code.
"""
import argparse
import json
import sys
import time

import numpy as np

from . import datanoise, lab, models, ndgrad
from .errors import ComatchError, ConfigurationError


def _config(args):
    cfg = lab.load_config(args.config)
    for item in args.set or ():
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        cfg = lab.set_value(cfg, key, value)
    return cfg.validate()


def cmd_run(args):
    cfg = _config(args)

    def progress(m):
        if args.quiet:
            return
        acc = "-" if m["test_acc"] is None else f"{m['test_acc']:.4f}"
        prec = "-" if m["label_precision"] is None else f"{m['label_precision']:.3f}"
        print(f"epoch {m['epoch']:4d}  acc {acc}  precision {prec}  R {m['rate']:.3f}  lr {m['lr']:.2e}",
              flush=True)

    run_dir = lab.run_experiment(cfg, progress)
    print(json.dumps({"run_dir": str(run_dir), **lab.summarize(lab.read_metrics(run_dir / "metrics.csv"))},
                     sort_keys=True))
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"--values must be comma separated numbers: {exc}") from exc
    if args.relative:
        if args.param != "tau":
            raise ConfigurationError("--relative only applies to tau")
        values = [v * cfg.noise_rate for v in values]
    results = lab.sweep(cfg, args.param, values, jobs=args.jobs)
    for res in results:
        print(json.dumps({"run_id": res.run_id, args.param: res.value, "status": res.status,
                          **(res.summary or {})}, sort_keys=True))
    return 1 if any(r.status != "completed" for r in results) else 0


def cmd_audit_noise(args):
    cfg = _config(args)
    train, _, q = lab.load_data(cfg)
    if q is None:
        raise ConfigurationError("audit-noise needs noise_model symmetric or asymmetric")
    audit = datanoise.noise_audit(train)
    print(json.dumps({
        "noise_model": cfg.noise_model,
        "noise_rate": cfg.noise_rate,
        "samples": len(train),
        "realized_flip_rate": audit.realized_flip_rate,
        "target_q": np.round(q.q, 6).tolist(),
        "empirical_q": np.round(audit.empirical_q, 6).tolist(),
    }, indent=2))
    return 0


def cmd_grad_check(args):
    rng = np.random.default_rng(args.seed)
    if args.model == "mlp":
        shape = (3, 8, 8)
        net = models.build_mlp(int(np.prod(shape)), [32, 16], 4, args.seed, dtype=np.float64, input_shape=shape)
        classes = 4
    else:
        shape = (3, 32, 32)
        net = models.build_cnn7(10, args.seed, dtype=np.float64)
        classes = 10
    x = rng.random((args.batch,) + shape)
    target = np.eye(classes)[rng.integers(0, classes, args.batch)]
    t0 = time.perf_counter()
    report = ndgrad.grad_check(net, (x, target), tolerance=args.tolerance, max_per_layer=args.max_per_layer,
                               seed=args.seed)
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} max relative error {report.max_rel_error:.3e} "
          f"({report.checked} entries, {report.skipped_kinks} kinks skipped, {time.perf_counter() - t0:.1f}s)")
    return 0 if report.passed else 1


def build_parser():
    p = argparse.ArgumentParser(prog="comatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    r = sub.add_parser("run", help="train one configuration")
    with_config(r)
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="one run per value of lambda or tau")
    with_config(s)
    s.add_argument("--param", required=True, choices=("lambda", "tau", "tau_scale", "seed"))
    s.add_argument("--values", required=True, help="comma separated, e.g. 0.05,0.35,0.65,0.95")
    s.add_argument("--relative", action="store_true", help="tau values are multiples of noise_rate")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_sweep)

    a = sub.add_parser("audit-noise", help="corrupt the configured training set and report Q")
    with_config(a)
    a.set_defaults(fn=cmd_audit_noise)

    g = sub.add_parser("grad-check", help="finite-difference check of backprop")
    g.add_argument("--model", choices=("mlp", "cnn7"), default="mlp")
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--max-per-layer", type=int, default=10)
    g.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ComatchError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
