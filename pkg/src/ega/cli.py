"""Command-line entry point: ``ega <subcommand> [--config FILE] [--out DIR] ...``.

Configuration is one JSON document with a section per module::

    {"pretrain": {...}, "fl": {...}, "data": {...}, "codec": "path.ckpt",
     "analysis": {...}, "sweep": {...}}

Any field can be overridden with a dotted flag, e.g. ``--fl.rounds 5`` or
``--set pretrain.epochs=3``.  Values are parsed as JSON when possible.
"""

import argparse
import copy
import hashlib
import json
import logging
import sys
import threading
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, EgaError, FormatError, ProtocolError

log = logging.getLogger("ega")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO, EXIT_PROTOCOL = 0, 2, 3, 4, 5

DEFAULT_ANALYSIS = {
    "n": [1.0, 0.5],
    "trials": 1000,
    "attack_seeds": 20,
    "attack_lr": 0.1,
}
DEFAULT_SWEEP = {
    "ms": None, "ss": None, "bs": None, "hs": None, "seeds": None, "h_ratio": None, "workers": 1,
}


# -- configuration ----------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config, dotted, value):
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {dotted!r}")
    node = config
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {dotted!r}: {key!r} is not a section")
        node = child
    node[keys[-1]] = value


def parse_dotted_flags(extra):
    """Turn leftover ``--a.b value`` / ``--a.b=value`` tokens into pairs."""
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"flag {tok} needs a value")
            raw = extra[i + 1]
            i += 2
        pairs.append((key, _parse_value(raw)))
    return pairs


def load_config(path, overrides=(), seed=None):
    """Read the JSON config at ``path`` (optional) and apply overrides."""
    config = {}
    if path is not None:
        try:
            with open(path) as fh:
                config = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(config, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    config = copy.deepcopy(config)
    for key, value in overrides:
        apply_override(config, key, value)
    if seed is not None:
        config["seed"] = seed
        for section in ("pretrain", "fl", "data"):
            config.setdefault(section, {})["seed"] = seed
    return config


def _section(config, name, defaults=None):
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    if defaults is None:
        return dict(value)
    unknown = set(value) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {name} fields: {sorted(unknown)}")
    return {**defaults, **value}


def pretrain_config(config):
    from .pretrain import PretrainConfig

    try:
        return PretrainConfig(**_section(config, "pretrain"))
    except TypeError as exc:
        raise ConfigError(f"pretrain section: {exc}") from None


def fl_config(config):
    from .fedsim.loop import FlConfig

    return FlConfig.from_dict(_section(config, "fl"))


def data_config(config):
    from .fedsim.experiment import DataConfig

    return DataConfig.from_dict(_section(config, "data"))


def codec_path(config, required=True):
    path = config.get("codec")
    if path is None and required:
        raise ConfigError("no codec checkpoint given (set \"codec\" or --codec)")
    return path


def load_codec(path):
    from .codec import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"codec checkpoint not found: {path}") from None


# -- output directory -------------------------------------------------------

class RunDir:
    """``manifest.json``, ``metrics.csv``, ``reports/`` and ``checkpoints/``."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            (self.root / "reports").mkdir(parents=True, exist_ok=True)
            (self.root / "checkpoints").mkdir(exist_ok=True)
        except OSError as exc:
            raise FormatError(f"cannot create output directory {root}: {exc}") from None
        self.manifest = {}
        self._log_handler = logging.FileHandler(self.root / "run.log")
        self._log_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        logging.getLogger("ega").addHandler(self._log_handler)

    @property
    def metrics(self):
        return self.root / "metrics.csv"

    def report(self, name):
        return self.root / "reports" / name

    def checkpoint(self, name):
        return self.root / "checkpoints" / name

    def write_manifest(self, **entries):
        self.manifest.update(entries)
        with open(self.root / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")

    def close(self):
        logging.getLogger("ega").removeHandler(self._log_handler)
        self._log_handler.close()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _start(args, config, run, resolved=None, **artifacts):
    run.write_manifest(
        command=args.command,
        config_path=args.config,
        config=config,
        resolved=resolved or {},
        seed=config.get("seed"),
        output_dir=str(run.root),
        artifacts=artifacts,
    )


# -- subcommands ------------------------------------------------------------

def cmd_pretrain(args, config):
    from .codec import checkpoint_crc, save_checkpoint
    from .pretrain import train_codec
    from .analysis.report import write_json_report, write_rows_csv

    cfg = pretrain_config(config)
    run = RunDir(args.out)
    _start(args, config, run, {"pretrain": asdict(cfg)})
    log.info("pretraining codec %s", asdict(cfg))
    model, rep = train_codec(cfg)
    ckpt = run.checkpoint("codec.ckpt")
    save_checkpoint(model, ckpt)
    rows = [
        {"epoch": i, "train_loss": tr, "test_loss": te}
        for i, (tr, te) in enumerate(zip(rep.train_loss, rep.test_loss))
    ]
    write_rows_csv(run.metrics, rows, ["epoch", "train_loss", "test_loss"])
    summary = {
        "sigma_hat": model.sigma_hat, "best_epoch": rep.best_epoch,
        "best_test_loss": rep.best_test_loss, "initial_test_loss": rep.initial_test_loss,
        "n_params": model.n_params,
    }
    write_json_report(run.report("pretrain.json"), asdict(cfg), summary)
    write_rows_csv(run.report("pretrain.csv"), [{**asdict(cfg), **summary}])
    log.info("pretraining took %.1f s", rep.wall_time)
    run.write_manifest(outputs={"codec_crc": checkpoint_crc(ckpt), "metrics": file_digest(run.metrics)})
    print(f"codec written to {ckpt}  sigma_hat={model.sigma_hat:.6g}")
    run.close()


def _federation(config):
    from .fedsim.experiment import build_federation

    return build_federation(data_config(config))


def _resolved_fl(config, cfg):
    return {"fl": cfg.to_dict(), "data": data_config(config).to_dict()}


def cmd_fl_run(args, config):
    from .codec import checkpoint_crc
    from .fedsim.loop import run_federated, write_metrics_csv
    from .analysis.report import write_json_report

    cfg = fl_config(config)
    codec = None
    artifacts = {}
    if cfg.ega_enabled:
        path = codec_path(config)
        codec = load_codec(path)
        artifacts["codec_crc"] = checkpoint_crc(path)
        if codec.m_train != cfg.clients_per_round:
            raise ConfigError(
                f"fl.clients_per_round={cfg.clients_per_round} but the codec was trained "
                f"for m={codec.m_train}"
            )
    fed = _federation(config)
    artifacts["dataset_digest"] = fed.digest
    run = RunDir(args.out)
    _start(args, config, run, _resolved_fl(config, cfg), **artifacts)
    _, metrics = run_federated(cfg, fed.task, fed.clients, fed.test_data, codec)
    write_metrics_csv(metrics, run.metrics)
    last = metrics[-1] if metrics else None
    write_json_report(run.report("fl.json"), cfg.to_dict(), {
        "accuracy": [r.accuracy for r in metrics],
        "loss": [r.loss for r in metrics],
        "n_used": [r.n_used for r in metrics],
    })
    run.write_manifest(outputs={"metrics": file_digest(run.metrics)})
    if last is not None:
        print(f"{len(metrics)} rounds  final loss={last.loss:.6g} accuracy={last.accuracy:.4f}")
    run.close()


def cmd_verify_bound(args, config):
    from .analysis.bounds import verify_bound_montecarlo
    from .analysis.report import write_json_report, write_rows_csv
    from .codec import checkpoint_crc
    from .seeding import make_rng

    path = codec_path(config)
    codec = load_codec(path)
    opts = _section(config, "analysis", DEFAULT_ANALYSIS)
    ns = opts["n"] if isinstance(opts["n"], list) else [opts["n"]]
    seed = config.get("seed", 0)
    run = RunDir(args.out)
    _start(args, config, run, codec_crc=checkpoint_crc(path))
    rows, passed = [], True
    for n in ns:
        rep = verify_bound_montecarlo(codec, float(n), int(opts["trials"]), make_rng(seed, "bound", str(n)))
        print(rep.summary())
        passed &= rep.passed
        rows.append({
            "n": rep.n, "m": rep.m, "d": rep.d, "s": rep.s, "sigma_hat": rep.sigma_hat,
            "bound": rep.bound, "empirical_mse": rep.empirical_mse, "passed": int(rep.passed),
        })
    write_rows_csv(run.report("bound.csv"), rows)
    write_json_report(run.report("bound.json"), {"codec": path, **opts}, rows)
    print("PASS" if passed else "FAIL")
    run.close()


def cmd_attack(args, config):
    from .analysis.attack import attack_experiment
    from .analysis.report import write_json_report
    from .codec import checkpoint_crc

    path = codec_path(config)
    codec = load_codec(path)
    opts = _section(config, "analysis", DEFAULT_ANALYSIS)
    fed = _federation(config)
    run = RunDir(args.out)
    _start(args, config, run, codec_crc=checkpoint_crc(path), dataset_digest=fed.digest)
    x = np.concatenate([c.x for c in fed.clients])
    y = np.concatenate([c.y for c in fed.clients])
    base = int(config.get("seed", 0))
    seeds = [base + i for i in range(int(opts["attack_seeds"]))]
    res = attack_experiment(fed.task, x, y, codec, seeds, lr=float(opts["attack_lr"]))
    res["ratio"] = res["trained_median"] / res["ideal_floor"]
    write_json_report(run.report("attack.json"), {"codec": path, "seeds": seeds}, res)
    print(
        f"median relative error trained={res['trained_median']:.4g} "
        f"ideal floor={res['ideal_floor']:.4g} ratio={res['ratio']:.3g}"
    )
    run.close()


def cmd_sweep(args, config):
    from .pretrain import sweep, sweep_configs, write_sweep_csv

    base = pretrain_config(config)
    opts = _section(config, "sweep", DEFAULT_SWEEP)
    configs = sweep_configs(
        base, opts["ms"], opts["ss"], opts["bs"], opts["hs"], opts["seeds"], opts["h_ratio"]
    )
    run = RunDir(args.out)
    _start(args, config, run)
    rows = sweep(configs, int(opts["workers"]))
    write_sweep_csv(rows, run.report("sweep.csv"))
    for row in rows:
        print(
            f"m={row['m']} s={row['s']} b={row['b']} h={row['h']} seed={row['seed']} "
            f"sigma_hat={row['sigma_hat']:.5g} sigma_hat/s={row['sigma_hat'] / row['s']:.5g}"
        )
    run.close()


def cmd_report(args, config):
    from .analysis.report import COMPARE_FIELDS, merge_metrics, write_rows_csv

    if args.compression and len(args.compression) != len(args.metrics):
        raise ConfigError("--compression needs one value per metrics file")
    missing = [p for p in args.metrics if not Path(p).exists()]
    if missing:
        raise ConfigError(f"metrics file not found: {missing[0]}")
    table = merge_metrics(args.metrics, args.compression)
    run = RunDir(args.out)
    _start(args, config, run, inputs={str(p): file_digest(p) for p in args.metrics})
    write_rows_csv(run.report("compare.csv"), table, COMPARE_FIELDS)
    print(f"{'algo':<10} {'ega':>3} {'comp':>5} {'rounds':>6} {'final':>7} {'best':>7}  source")
    for r in table:
        print(
            f"{r['algo']:<10} {r['ega']:>3} {r['compression']:>5g} {r['rounds']:>6} "
            f"{r['final_accuracy']:>7.4f} {r['best_accuracy']:>7.4f}  {r['source']}"
        )
    run.close()


def cmd_serve(args, config):
    from .codec import checkpoint_crc
    from .fedsim.loop import write_metrics_csv
    from .netharness.server import AggregationServer, parse_address

    cfg = fl_config(config)
    path = codec_path(config)
    codec = load_codec(path)
    fed = _federation(config)
    host, port = parse_address(args.listen)
    run = RunDir(args.out)
    _start(args, config, run, _resolved_fl(config, cfg),
           codec_crc=checkpoint_crc(path), dataset_digest=fed.digest)
    server = AggregationServer(
        cfg, codec, fed.task, fed.test_data, len(fed.clients), token=args.token,
        host=host, port=port, join_timeout=args.join_timeout_ms / 1000,
        round_timeout=args.round_timeout_ms / 1000,
    )
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    server.run()
    write_metrics_csv(server.metrics, run.metrics)
    run.write_manifest(outputs={"metrics": file_digest(run.metrics)})
    run.close()
    if server.aborted is not None:
        raise ProtocolError(f"round {server.aborted[0]} aborted: {server.aborted[1]}")
    print(f"{len(server.metrics)} rounds served")


def parse_ids(spec, limit):
    """``"3"``, ``"0-9"`` or ``"1,4,7"`` to a sorted id list; ``"all"`` for every client."""
    if spec == "all":
        return list(range(limit))
    ids = set()
    for part in spec.split(","):
        lo, sep, hi = part.partition("-")
        try:
            ids.update(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError:
            raise ConfigError(f"bad client id list {spec!r}") from None
    bad = [i for i in ids if not 0 <= i < limit]
    if bad:
        raise ConfigError(f"client ids {sorted(bad)} outside 0..{limit - 1}")
    return sorted(ids)


def cmd_client(args, config):
    from .netharness.server import parse_address, run_client

    cfg = fl_config(config)
    codec = load_codec(codec_path(config))
    fed = _federation(config)
    address = parse_address(args.connect)
    ids = parse_ids(args.client_id, len(fed.clients))
    errors = []

    def one(cid):
        try:
            run_client(address, fed.clients[cid], cfg, fed.task, codec, args.token,
                       args.connect_timeout_ms / 1000)
        except (EgaError, OSError) as exc:
            errors.append((cid, exc))

    threads = [threading.Thread(target=one, args=(cid,)) for cid in ids]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        cid, exc = errors[0]
        if isinstance(exc, EgaError):
            raise exc
        raise ProtocolError(f"client {cid}: {exc}")
    print(f"{len(ids)} clients finished")


COMMANDS = {
    "pretrain": (cmd_pretrain, "train an encoder/decoder pair offline"),
    "fl-run": (cmd_fl_run, "run federated training in the simulator"),
    "verify-bound": (cmd_verify_bound, "Monte-Carlo check of the aggregation variance bound"),
    "attack": (cmd_attack, "zero-substitution recovery attack against a codec"),
    "sweep": (cmd_sweep, "train codecs over a grid of (m, s, b, h, seed)"),
    "report": (cmd_report, "merge metrics CSVs into a comparison table"),
    "serve": (cmd_serve, "run the aggregation server over TCP"),
    "client": (cmd_client, "run one or more clients against a server"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ega", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides every section seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. fl.rounds=5 (repeatable)")
        if name != "client":
            p.add_argument("--out", default="runs/" + name, help="output directory")
        if name in ("fl-run", "verify-bound", "attack", "serve", "client"):
            p.add_argument("--codec", help="codec checkpoint (overrides config 'codec')")
        if name == "report":
            p.add_argument("metrics", nargs="+", help="metrics CSV files")
            p.add_argument("--compression", type=float, nargs="+",
                           help="compression level of each file, b/h")
        if name == "serve":
            p.add_argument("--listen", default="127.0.0.1:0", help="host:port")
            p.add_argument("--join-timeout-ms", type=int, default=60_000)
        if name == "client":
            p.add_argument("--connect", required=True, help="server host:port")
            p.add_argument("--client-id", default="all",
                           help="id, range a-b, comma list, or 'all'")
            p.add_argument("--connect-timeout-ms", type=int, default=30_000)
        if name in ("serve", "client"):
            p.add_argument("--token", default="", help="shared run token")
        if name == "serve":
            p.add_argument("--round-timeout-ms", type=int, default=60_000)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    func = COMMANDS[args.command][0]
    try:
        overrides = []
        for item in args.set:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides.append((key, _parse_value(raw)))
        overrides += parse_dotted_flags(extra)
        if getattr(args, "codec", None):
            overrides.append(("codec", args.codec))
        config = load_config(args.config, overrides, args.seed)
        func(args, config)
    except EgaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TypeError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
