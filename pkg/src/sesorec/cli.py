"""Command-line entry points: ``prepare``, ``train``, ``eval`` and ``bench-ssmm``.

Every option can also be set through an environment variable named
``SESOREC_<OPTION>`` (dashes become underscores), e.g. ``SESOREC_LR=0.01``.
Command-line flags win over the environment.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import DataError, RatingDataset, load_manifest, prepare_dataset, read_prepared, write_prepared
from .model import (
    MODELS,
    Divergence,
    Hyperparams,
    SecureProductClient,
    SocialPartyServer,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    train_sesorec_loopback,
)
from .ring import FixedPointConfig, ring_matmul
from .sharing import MaskSource, ProtocolError, TrustedInitializer, reconstruct, ssmm_execute, tismm_execute
from .transport import TransportError, connect, connect_loopback, tcp_pair

log = logging.getLogger("sesorec")

ENV_PREFIX = "SESOREC_"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PROTOCOL, EXIT_DIVERGENCE = 0, 2, 3, 4, 5

GAMMA_SWEEP = (1e-2, 1e-1, 1e0, 1e1)
DEFAULT_GRID = {"lambda": (1e-3, 1e-2, 1e-1, 1.0), "lr": (1e-3, 5e-3, 1e-2, 5e-2)}
REPORT_FIELDS = ["model", "fold", "rmse", "ndcg@10", "train_seconds", "bytes_communicated"]


class ConfigError(ValueError):
    pass


# -- argument parsing -------------------------------------------------------------

def _flag(value) -> bool:
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _add(p, *names, **kw):
    """``add_argument`` whose default may come from the environment."""
    dest = kw.get("dest") or names[0].lstrip("-").replace("-", "_")
    env = os.environ.get(ENV_PREFIX + dest.upper())
    if env is not None:
        kw["default"] = _flag(env) if kw.get("action") == "store_true" else env
    p.add_argument(*names, **kw)


def _common(p):
    _add(p, "--seed", type=int, default=0, help="seed for initialization, shuffling and folds")
    _add(p, "--out", default="out", help="output directory (or file for eval)")
    _add(p, "--verbose", "-v", action="store_true")


def _fixed_point(p):
    _add(p, "--fp-bits", type=int, default=64, choices=(32, 64), help="ring width in bits")
    _add(p, "--frac-bits", type=int, default=20, help="fractional bits of the fixed-point encoding")


def _transport(p):
    _add(p, "--transport", default="loopback", choices=("loopback", "tcp"))
    _add(p, "--role", choices=("rating", "social"), default=None,
         help="which party this process plays (tcp only)")
    _add(p, "--listen", default=None, help="host:port to accept the peer on")
    _add(p, "--peer", default=None, help="host:port of the peer")
    _add(p, "--timeout", type=float, default=60.0, help="seconds to wait for the peer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sesorec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load, filter and split a raw dataset")
    _add(p, "--dataset", required=os.environ.get(ENV_PREFIX + "DATASET") is None, help="manifest file")
    _common(p)

    p = sub.add_parser("train", help="train mf, soreg or sesorec")
    _add(p, "--dataset", required=os.environ.get(ENV_PREFIX + "DATASET") is None,
         help="prepared dataset directory or a manifest file")
    _add(p, "--model", default="soreg", choices=MODELS)
    _add(p, "--fold", default="0", help="held-out fold, or 'all' for every fold, or 'none' to train on everything")
    _add(p, "--k", type=int, default=10, help="latent dimension")
    _add(p, "--batch", type=int, default=64, help="minibatch size")
    _add(p, "--gamma", type=float, default=0.1, help="social regularization weight")
    _add(p, "--lambda", dest="lam", type=float, default=0.1, help="L2 weight")
    _add(p, "--lr", type=float, default=0.01, help="learning rate")
    _add(p, "--epochs", type=int, default=20)
    _add(p, "--stale-u", action="store_true", help="sync U once per epoch instead of every batch")
    _add(p, "--sweep-gamma", action="store_true", help=f"train once per gamma in {GAMMA_SWEEP}")
    _add(p, "--grid", nargs="?", const="default", default=None,
         help="grid search, e.g. 'lambda=0.01,0.1;lr=0.005,0.01' (bare flag uses a built-in grid)")
    _fixed_point(p)
    _transport(p)
    _common(p)

    p = sub.add_parser("eval", help="score a checkpoint on a held-out fold")
    _add(p, "--checkpoint", required=os.environ.get(ENV_PREFIX + "CHECKPOINT") is None)
    _add(p, "--dataset", required=os.environ.get(ENV_PREFIX + "DATASET") is None,
         help="prepared dataset directory or a manifest file")
    _add(p, "--fold", type=int, default=None, help="defaults to the fold recorded in the checkpoint")
    _add(p, "--model", default=None, help="label for the report row")
    _common(p)

    p = sub.add_parser("bench-ssmm", help="time SSMM against the trusted-initializer baseline")
    _add(p, "--h", type=int, nargs="+", default=[100, 1000], help="square matrix sizes")
    _add(p, "--protocol", default="both", choices=("ssmm", "tismm", "both"))
    _add(p, "--repeats", type=int, default=1)
    _add(p, "--fp-bits", type=int, default=64, choices=(32, 64))
    _add(p, "--transport", default="loopback", choices=("loopback", "tcp"))
    _common(p)
    return parser


# -- helpers -------------------------------------------------------------------------

def _fp(args) -> FixedPointConfig:
    try:
        return FixedPointConfig(args.fp_bits, args.frac_bits)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _hp(args, **over) -> Hyperparams:
    vals = dict(k=args.k, gamma=args.gamma, lam=args.lam, theta=args.lr,
                batch_size=args.batch, epochs=args.epochs, seed=args.seed)
    vals.update(over)
    try:
        return Hyperparams(**vals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_dataset(path, need_ratings: bool = True):
    """A prepared directory, or a manifest that is prepared on the fly."""
    path = Path(path)
    if path.is_dir():
        if not (path / "stats.json").exists():
            raise DataError(f"{path} is not a prepared dataset (run 'sesorec prepare')")
        return read_prepared(path, with_ratings=need_ratings)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    return prepare_dataset(load_manifest(path))


def _write_csv(path, rows, fields, append=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerows(rows)


def parse_grid(text: str | None) -> dict:
    if text is None:
        return {}
    if text == "default":
        return dict(DEFAULT_GRID)
    grid = {}
    for part in filter(None, (s.strip() for s in text.split(";"))):
        key, sep, vals = part.partition("=")
        key = key.strip()
        if not sep or key not in ("lambda", "lr", "gamma"):
            raise ConfigError(f"bad grid entry {part!r}; use lambda=..,..;lr=..,..")
        try:
            grid[key] = tuple(float(v) for v in vals.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad grid values in {part!r}") from exc
    return grid


def _configs(args) -> list[dict]:
    grid = parse_grid(args.grid)
    if args.sweep_gamma:
        grid["gamma"] = GAMMA_SWEEP
    keys = list(grid)
    if not keys:
        return []
    names = {"lambda": "lam", "lr": "theta", "gamma": "gamma"}
    return [{names[k]: v for k, v in zip(keys, combo)} for combo in itertools.product(*(grid[k] for k in keys))]


def _folds(args, ds) -> list:
    f = str(args.fold).lower()
    if f == "none":
        return [None]
    if f == "all":
        if ds.folds is None:
            raise ConfigError("dataset has no folds")
        return sorted(int(x) for x in np.unique(ds.folds))
    try:
        return [int(f)]
    except ValueError as exc:
        raise ConfigError(f"--fold must be an integer, 'all' or 'none', got {args.fold!r}") from exc


# -- commands ------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    manifest = load_manifest(args.dataset)
    if args.seed:
        manifest.seed = args.seed
    ds, graph, stats = prepare_dataset(manifest)
    out = write_prepared(args.out, ds, graph, stats)
    print(f"{'Dataset':<12}{'#user':>8}{'#item':>8}{'#rating':>10}{'#social':>9}")
    print(f"{stats['dataset']:<12}{stats['users']:>8}{stats['items']:>8}{stats['ratings']:>10}{stats['social']:>9}")
    log.info("prepared dataset written to %s", out)
    return EXIT_OK


def _train_one(args, model, ds: RatingDataset, train_ds, graph, hp, cfg, channel=None):
    if model == "sesorec" and args.transport == "loopback":
        if graph is None:
            raise DataError("sesorec needs a social graph")
        return train_sesorec_loopback(train_ds, ds.n_users, ds.n_items, hp, graph, cfg, stale_u=args.stale_u)
    if model == "sesorec":
        client = SecureProductClient(channel, cfg, stale_u=args.stale_u)
        return train("sesorec", train_ds, ds.n_users, ds.n_items, hp, client=client)
    if model == "soreg" and graph is None:
        raise DataError("soreg needs a social graph")
    return train(model, train_ds, ds.n_users, ds.n_items, hp, graph=graph)


def _open_tcp(args, cfg):
    if args.role is None:
        raise ConfigError("--transport tcp needs --role rating|social")
    if (args.listen is None) == (args.peer is None):
        raise ConfigError("--transport tcp needs exactly one of --listen or --peer")
    role = {"rating": "rating_party", "social": "social_party"}[args.role]
    return connect(role, cfg, listen=args.listen, peer=args.peer, timeout=args.timeout)


def _serve_social(args, cfg) -> int:
    _, graph, stats = load_dataset(args.dataset, need_ratings=False)
    if graph is None:
        raise DataError("the social party needs a social graph")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _open_tcp(args, cfg) as ch:
        server = SocialPartyServer(ch, graph, cfg)
        t0 = time.perf_counter()
        n = server.serve()
        summary = {"role": "social", "requests": n, "seconds": time.perf_counter() - t0,
                   "bytes_communicated": ch.stats.total_bytes}
    (out / "social_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _fp(args)
    if args.transport == "tcp" and args.model != "sesorec":
        raise ConfigError("--transport tcp only applies to --model sesorec")
    if args.transport == "tcp" and args.role == "social":
        return _serve_social(args, cfg)
    configs = _configs(args)
    if args.transport == "tcp" and len(configs) > 1:
        raise ConfigError("sweeps and grids run over loopback only")
    ds, graph, _ = load_dataset(args.dataset)
    folds = _folds(args, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    channel = _open_tcp(args, cfg) if args.transport == "tcp" else None
    rows = []
    try:
        for ci, over in enumerate(configs or [{}]):
            hp = _hp(args, **over)
            tag = "" if not configs else f"_cfg{ci}"
            for fold in folds:
                train_ds, test_ds = (ds, None) if fold is None else ds.split(fold)
                res = _train_one(args, args.model, ds, train_ds, graph, hp, cfg, channel)
                ftag = f"{tag}_fold{fold}" if fold is not None else tag
                log_rows = [dict(h, wall_time=h["seconds"], bytes_communicated=h["bytes"]) for h in res.history]
                _write_csv(out / f"train_log{ftag}.csv", log_rows,
                           ["epoch", "loss", "wall_time", "bytes_communicated", "total_bytes"])
                save_checkpoint(out / f"checkpoint{ftag}.bin", res.factors, hp, model=args.model,
                                fold=fold, train_seconds=res.seconds, bytes_communicated=res.bytes_communicated)
                row = {"model": args.model, "fold": fold, "gamma": hp.gamma, "lambda": hp.lam, "lr": hp.theta,
                       "train_seconds": res.seconds, "bytes_communicated": res.bytes_communicated}
                if test_ds is not None and len(test_ds):
                    metrics = evaluate(res.factors, test_ds, train_ds)
                    row.update(metrics)
                rows.append(row)
                log.info("%s", row)
    finally:
        if channel is not None:
            if not channel.closed:
                channel.send_json({"op": "stop"})
            channel.close()
    fields = REPORT_FIELDS + ["gamma", "lambda", "lr"]
    _write_csv(out / "report.csv", rows, fields)
    if configs:
        best = _best(rows)
        (out / "best.json").write_text(json.dumps(best, indent=2) + "\n")
        print(json.dumps(best))
    else:
        for r in rows:
            print(json.dumps(r))
    return EXIT_OK


def _best(rows) -> dict:
    """Configuration with the lowest mean RMSE across folds."""
    by = {}
    for r in rows:
        by.setdefault((r["gamma"], r["lambda"], r["lr"]), []).append(r.get("rmse", np.nan))
    summary = [{"gamma": g, "lambda": l, "lr": t, "mean_rmse": float(np.mean(v))} for (g, l, t), v in by.items()]
    return {"best": min(summary, key=lambda s: (np.isnan(s["mean_rmse"]), s["mean_rmse"])), "all": summary}


def _number(text, cast):
    try:
        return cast(text)
    except ValueError:
        return text


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    factors, hp, meta = load_checkpoint(path)
    ds, _, _ = load_dataset(args.dataset)
    fold = args.fold
    if fold is None:
        if meta.get("fold", "None") == "None":
            raise ConfigError("checkpoint has no held-out fold; pass --fold")
        fold = int(meta["fold"])
    if factors.U.shape[1] != ds.n_users or factors.V.shape[1] != ds.n_items:
        raise DataError("checkpoint does not match the dataset's user/item counts")
    train_ds, test_ds = ds.split(fold)
    if not len(test_ds):
        raise DataError(f"fold {fold} is empty")
    row = {"model": args.model or meta.get("model", "unknown"), "fold": fold,
           **evaluate(factors, test_ds, train_ds),
           "train_seconds": _number(meta.get("train_seconds", ""), float),
           "bytes_communicated": _number(meta.get("bytes_communicated", ""), int)}
    out = Path(args.out)
    if out.suffix != ".csv":
        out = out / "report.csv"
    _write_csv(out, [row], REPORT_FIELDS, append=True)
    print(json.dumps(row))
    return EXIT_OK


def bench_once(h: int, protocol: str, transport: str = "loopback", bits: int = 64, seed=0) -> dict:
    """Time one secure product of two random ``h x h`` ring matrices.

    Includes (de)serialization and channel transfer; the trusted
    initializer's dealing time is reported separately.  The result is
    checked against the plaintext product.
    """
    if h < 2:
        raise ConfigError("h must be at least 2")
    rng = MaskSource(seed, bits)
    P, Q = rng.uniform((h, h)), rng.uniform((h, h))
    channels = tcp_pair() if transport == "tcp" else connect_loopback()
    before = channels[0].stats.total_bytes
    dealer = 0.0
    try:
        if protocol == "ssmm":
            t0 = time.perf_counter()
            out = ssmm_execute(P, Q, channels=channels, bits=bits)
            seconds = time.perf_counter() - t0
        else:
            ti = TrustedInitializer(seed, bits)
            t0 = time.perf_counter()
            triples = ti.deal(h, h, h)
            dealer = time.perf_counter() - t0
            t0 = time.perf_counter()
            M, N = tismm_execute(P, Q, ti, channels=channels, bits=bits, triples=triples)
            seconds = time.perf_counter() - t0
            out = reconstruct(M, N, bits)
        sent = channels[0].stats.total_bytes - before
    finally:
        for ch in channels:
            ch.close()
    correct = bool(np.array_equal(out, ring_matmul(P, Q, bits)))
    if not correct:
        raise ProtocolError(f"{protocol} produced a wrong product at h={h}")
    return {"protocol": protocol, "h": h, "transport": transport, "seconds": seconds,
            "dealer_seconds": dealer, "bytes": sent, "correct": correct}


def cmd_bench(args) -> int:
    protocols = ("ssmm", "tismm") if args.protocol == "both" else (args.protocol,)
    rows = []
    for h in args.h:
        for rep in range(args.repeats):
            for proto in protocols:
                row = bench_once(h, proto, args.transport, args.fp_bits, args.seed + rep)
                row["repeat"] = rep
                rows.append(row)
                print(json.dumps(row))
    out = Path(args.out)
    if out.suffix != ".csv":
        out = out / "bench_ssmm.csv"
    _write_csv(out, rows, ["protocol", "h", "transport", "repeat", "seconds", "dealer_seconds", "bytes", "correct"])
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "bench-ssmm": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TransportError, ProtocolError, ConnectionError, TimeoutError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except Divergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
