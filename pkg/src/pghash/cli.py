"""``pghash`` command line: scan, verify, train, fed and gen-data.

Settings resolve as defaults < ``--config`` file < command-line flags.  The
config file holds ``key = value`` lines whose keys are the long flag names
(hyphens or underscores).  Every run writes ``manifest.json`` with the fully
resolved settings into its output directory.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, stats, suite
from .data import ParseError, parse_xc, synth_dataset, train_test_split, write_xc
from .fed import run_experiment
from .training import Method, RunConfig, train, write_ledger
from .net import save_checkpoint

log = logging.getLogger("pghash")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Defaults per subcommand
# ---------------------------------------------------------------------------

_RUN_DEFAULTS = {k: v for k, v in RunConfig().to_dict().items()}
_DATA_DEFAULTS = {
    "data": None, "test": None, "synth_points": 5500, "synth_features": 1000, "synth_labels": 2000,
    "synth_labels_per_point": 2, "synth_feats_per_point": 10, "synth_signal": 10.0, "test_fraction": 0.1,
}
DEFAULTS = {
    "scan": {"d": "100", "k": 25, "c": "25", "tau": "10,100", "family": "pghash", "angles": 180, "seed": 0},
    "verify": {"samples": 100_000, "d": 128, "c": 16, "quick": False, "seed": 0},
    "gen-data": {"points": 5500, "features": 1000, "labels": 2000, "labels_per_point": 2,
                 "feats_per_point": 10, "signal": 10.0, "test_fraction": 0.1, "seed": 0},
    "train": {**_RUN_DEFAULTS, **_DATA_DEFAULTS},
    "fed": {**_RUN_DEFAULTS, **_DATA_DEFAULTS},
}


def _int_list(text) -> list[int]:
    try:
        vals = [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not vals:
        raise UsageError("empty list")
    return vals


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pghash", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", default=None, help="key = value settings file")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        sp.add_argument("-v", "--verbose", action="store_true", default=False)

    s = sub.add_parser("scan", help="average Hamming distance versus true angle", argument_default=argparse.SUPPRESS)
    common(s)
    s.add_argument("--d", help="input dimension(s), comma separated")
    s.add_argument("--k", type=int, help="bits per table")
    s.add_argument("--c", help="sketch dimension(s), comma separated")
    s.add_argument("--tau", help="table counts, comma separated")
    s.add_argument("--family", help="pghash, simhash or both comma separated")
    s.add_argument("--angles", type=int, help="number of interior grid angles in (0, pi)")

    v = sub.add_parser("verify", help="run the statistical verification suite", argument_default=argparse.SUPPRESS)
    common(v)
    v.add_argument("--samples", type=int, help="folded-norm sample count")
    v.add_argument("--d", type=int, help="folded-norm input dimension")
    v.add_argument("--c", type=int, help="folded-norm sketch dimension")
    v.add_argument("--quick", action="store_true", help="small sample counts (smoke test)")

    g = sub.add_parser("gen-data", help="write a synthetic train/test pair", argument_default=argparse.SUPPRESS)
    common(g)
    g.add_argument("--points", type=int)
    g.add_argument("--features", type=int)
    g.add_argument("--labels", type=int)
    g.add_argument("--labels-per-point", dest="labels_per_point", type=int)
    g.add_argument("--feats-per-point", dest="feats_per_point", type=int)
    g.add_argument("--signal", type=float)
    g.add_argument("--test-fraction", dest="test_fraction", type=float)

    for name in ("train", "fed"):
        t = sub.add_parser(name, help="single-machine training" if name == "train" else "federated simulation",
                           argument_default=argparse.SUPPRESS)
        common(t)
        t.add_argument("--data", help="training file (extreme-classification format); synthetic if omitted")
        t.add_argument("--test", help="test file; otherwise a 90/10 split of --data")
        t.add_argument("--method", choices=[m.value for m in Method])
        if name == "fed":
            t.add_argument("--devices", dest="num_devices", type=int)
        t.add_argument("--steps", dest="total_steps", type=int, help="total training steps T")
        t.add_argument("--steps-per-lsh", dest="steps_per_lsh", type=int)
        t.add_argument("--batch", dest="batch_size", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--hidden", type=int)
        t.add_argument("--k", type=int)
        t.add_argument("--c", type=int)
        t.add_argument("--tables", type=int)
        t.add_argument("--cr", type=float, help="compression ratio")
        t.add_argument("--strategy", choices=["vanilla", "hamming-topk", "hamming-threshold"])
        t.add_argument("--top-k", dest="top_k", type=int)
        t.add_argument("--threshold", type=float)
        t.add_argument("--sample-fraction", dest="sample_fraction", type=float)
        t.add_argument("--no-inject-labels", dest="inject_labels", action="store_false")
        t.add_argument("--argmax", choices=["absmax", "max"])
        t.add_argument("--eval-every", dest="eval_every", type=int)
        t.add_argument("--eval-size", dest="eval_size", type=int)
        t.add_argument("--device-seeds", dest="device_seeds")
        for key in _DATA_DEFAULTS:
            if key.startswith("synth_"):
                t.add_argument("--" + key.replace("_", "-"), dest=key,
                               type=float if key == "synth_signal" else int)
        t.add_argument("--test-fraction", dest="test_fraction", type=float)
    return p


def _aliases(parser: argparse.ArgumentParser) -> dict[str, str]:
    """Map every long flag spelling (without dashes, hyphens as underscores) to its setting."""
    out = {}
    for action in parser._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                out[opt[2:].replace("-", "_")] = action.dest
    return out


def read_config(path, allowed, aliases=None) -> dict:
    aliases = aliases or {}
    cp = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise UsageError(f"bad config {path}: {e}") from None
    out = {}
    for key, val in cp["run"].items():
        key = key.replace("-", "_")
        key = aliases.get(key, key)
        if key not in allowed:
            raise UsageError(f"unknown config key {key!r} in {path}")
        out[key] = val
    return out


def resolve(command: str, ns: argparse.Namespace, aliases=None) -> dict:
    settings = dict(DEFAULTS[command])
    if ns.config:
        settings.update(read_config(ns.config, settings, aliases))
    for key, val in vars(ns).items():
        if key in settings:
            settings[key] = val
    return settings


def _typed(settings: dict, key: str, kind):
    try:
        v = settings[key]
        if kind is bool and isinstance(v, str):
            return v.strip().lower() in ("1", "true", "yes", "on")
        return kind(v)
    except (TypeError, ValueError):
        raise UsageError(f"{key} must be {kind.__name__}, got {settings[key]!r}") from None


def write_manifest(out: Path, command: str, settings: dict, argv) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "version": __version__, "argv": list(argv),
                "settings": {k: (v.value if hasattr(v, "value") else v) for k, v in settings.items()}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_scan(s: dict, out: Path) -> int:
    families = [f.strip() for f in str(s["family"]).split(",") if f.strip()]
    for f in families:
        if f not in ("pghash", "simhash"):
            raise UsageError(f"unknown family {f!r} (pghash or simhash)")
    n_angles = _typed(s, "angles", int)
    if n_angles < 1:
        raise UsageError("--angles must be at least 1: angles must lie strictly inside (0, pi)")
    k, seed = _typed(s, "k", int), _typed(s, "seed", int)
    grid = np.linspace(0, math.pi, n_angles + 2)[1:-1]
    written = []
    for d in _int_list(s["d"]):
        for c in _int_list(s["c"]):
            for tau in _int_list(s["tau"]):
                for fam in families:
                    try:
                        rows = stats.angle_hamming_scan(d, k, c, tau, grid, fam, seed)
                    except ValueError as e:
                        raise UsageError(str(e)) from None
                    path = out / f"scan_{fam}_d{d}_k{k}_c{c}_tau{tau}.csv"
                    stats.write_scan_csv(rows, path)
                    written.append(path)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_verify(s: dict, out: Path) -> int:
    samples, d, c = _typed(s, "samples", int), _typed(s, "d", int), _typed(s, "c", int)
    if samples < 1 or c < 1 or c > d or d % c:
        raise UsageError("need samples >= 1 and a sketch dimension c dividing d")
    checks = suite.run_all(quick=_typed(s, "quick", bool), samples=samples, d=d, c=c, seed=_typed(s, "seed", int))
    suite.write_report(checks, out / "verify_report.txt", out / "verify_report.csv")
    for ch in checks:
        print(ch.line())
    failed = [ch.name for ch in checks if not ch.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_gen_data(s: dict, out: Path) -> int:
    try:
        ds = synth_dataset(_typed(s, "points", int), _typed(s, "features", int), _typed(s, "labels", int),
                           _typed(s, "feats_per_point", int), _typed(s, "labels_per_point", int),
                           _typed(s, "signal", float), _typed(s, "seed", int))
        tr, te = train_test_split(ds, _typed(s, "test_fraction", float), _typed(s, "seed", int))
    except ValueError as e:
        raise UsageError(str(e)) from None
    write_xc(tr, out / "train.txt")
    write_xc(te, out / "test.txt")
    print(out / "train.txt")
    print(out / "test.txt")
    return EXIT_OK


def _load_data(s: dict):
    seed = _typed(s, "seed", int)
    try:
        if s["data"]:
            ds = parse_xc(s["data"])
            if s["test"]:
                te = parse_xc(s["test"])
                if (te.num_features, te.num_labels) != (ds.num_features, ds.num_labels):
                    raise UsageError("train and test files disagree on feature or label counts")
                return ds, te
            return train_test_split(ds, _typed(s, "test_fraction", float), seed)
        ds = synth_dataset(_typed(s, "synth_points", int), _typed(s, "synth_features", int),
                           _typed(s, "synth_labels", int), _typed(s, "synth_feats_per_point", int),
                           _typed(s, "synth_labels_per_point", int), _typed(s, "synth_signal", float), seed)
        return train_test_split(ds, _typed(s, "test_fraction", float), seed)
    except (OSError, ParseError) as e:
        raise UsageError(f"cannot load data: {e}") from None


def _run_config(s: dict) -> RunConfig:
    try:
        return RunConfig.from_dict({k: s[k] for k in _RUN_DEFAULTS})
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_train(s: dict, out: Path, federated: bool) -> int:
    cfg = _run_config(s)
    if not federated and cfg.num_devices != 1:
        raise UsageError("train runs on a single device; use fed for more")
    tr, te = _load_data(s)
    if cfg.method.uses_sketch and cfg.c > cfg.hidden:
        raise UsageError(f"sketch dimension {cfg.c} exceeds hidden size {cfg.hidden}")
    try:
        if federated:
            res = run_experiment(cfg, tr, te, out_dir=out)
        else:
            res = train(cfg, tr, te)
            write_ledger(res.ledger, out / "ledger.csv")
            save_checkpoint(out / "checkpoint.npz", res.weights, res.optimizer, round=len(res.ledger),
                            method=cfg.method.value)
    except ValueError as e:
        raise UsageError(str(e)) from None
    last = res.ledger[-1] if res.ledger else None
    if last is not None:
        print(f"rounds {len(res.ledger)} loss {last.loss:.4f} active {last.avg_active_frac:.4f} "
              f"P@1 {res.final_p_at_1()}")
    print(out / "ledger.csv")
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        subparser = parser._subparsers._group_actions[0].choices[ns.command]
        settings = resolve(ns.command, ns, _aliases(subparser))
        out = Path(ns.out)
        if ns.command in ("train", "fed"):
            _run_config(settings)          # reject bad settings before any output
        write_manifest(out, ns.command, settings, argv)
        if ns.command == "scan":
            return cmd_scan(settings, out)
        if ns.command == "verify":
            return cmd_verify(settings, out)
        if ns.command == "gen-data":
            return cmd_gen_data(settings, out)
        return cmd_train(settings, out, federated=ns.command == "fed")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
