"""Command-line entry point: ``cipherlayer <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from ..blocks import LayerWeights
from ..he import RefreshOracle, keygen
from ..packing import matrix_from_bytes, matrix_to_bytes, pack_columns, unpack
from ..pipeline import KERNELS, reference_kernel, run_kernel
from ..runtime import LevelTracker, OpCounters
from .config import RunConfig
from .keys import backend_from_keys, load_keys, save_keys
from .server import InferenceServer, InferenceService, parse_address, run_client
from .weights import load_weights, save_weights

log = logging.getLogger("cipherlayer")
BENCH_KERNELS = ("pcmm", "ccmm", "attention", "rmsnorm")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(backend=args.backend, kernel=getattr(args, "kernel", None), seed=args.seed)


def _full_backend(args, strict: bool = False):
    kind, keys = load_keys(args.keys)
    if not keys.has_secret:
        raise SystemExit(f"{args.keys} holds evaluation keys only; this command needs the secret key file")
    return backend_from_keys(kind, keys, strict=strict, seed=args.seed or 0)


def _eval_backend(args, strict: bool = True):
    kind, keys = load_keys(args.keys)
    oracle = None
    if getattr(args, "oracle_keys", None):
        _, full = load_keys(args.oracle_keys)
        oracle = full
    return backend_from_keys(kind, keys.public_view(), oracle_keys=oracle if kind == "ckks" else None,
                             counters=OpCounters(), strict=strict), kind, keys, oracle


def _emit_report(tracker: LevelTracker, fmt: str, dest: str | None) -> None:
    text = tracker.table() if fmt == "table" else tracker.records_jsonl()
    if dest:
        Path(dest).write_text(text + ("\n" if not text.endswith("\n") else ""))
    else:
        print(text)


def cmd_gen_config(args) -> int:
    _config(args).save(args.out)
    return 0


def cmd_keygen(args) -> int:
    cfg = _config(args)
    t0 = time.perf_counter()
    keys = keygen(cfg.he_params(), cfg.seed, backend=cfg.backend)
    save_keys(keys, args.out, include_secret=True)
    if args.eval_out:
        save_keys(keys, args.eval_out, include_secret=False)
    log.info("generated %s keys %s in %.2fs", cfg.backend, keys.key_id, time.perf_counter() - t0)
    print(keys.key_id)
    return 0


def cmd_gen_weights(args) -> int:
    cfg = _config(args)
    w = LayerWeights.random(np.random.default_rng(cfg.seed), cfg.model_dim, cfg.ffn_dim, rope_base=cfg.rope_base)
    save_weights(w, args.out)
    return 0


def cmd_encrypt(args) -> int:
    be = _full_backend(args)
    X = np.load(args.input)
    pm = pack_columns(be, X, level=args.level)
    Path(args.out).write_bytes(matrix_to_bytes(pm, be.params.ring_degree))
    return 0


def cmd_decrypt(args) -> int:
    be = _full_backend(args)
    pm, _ = matrix_from_bytes(Path(args.input).read_bytes())
    np.save(args.out, unpack(be, pm))
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    be, _, _, _ = _eval_backend(args)
    pm, _ = matrix_from_bytes(Path(args.input).read_bytes())
    w = load_weights(args.weights)
    tracker = LevelTracker(be.counters)
    out = run_kernel(be, cfg.kernel, pm, w, cfg.layer_config(), tracker)
    Path(args.out).write_bytes(matrix_to_bytes(out, be.params.ring_degree))
    _emit_report(tracker, args.report, args.report_out)
    return 0


def bench_rows(cfg: RunConfig, kernels, sizes, seed: int = 0) -> list[dict]:
    """One record per (kernel, size): op counts, levels consumed, wall time and error vs plaintext."""
    from ..he import make_backend

    rows = []
    params = cfg.he_params()
    be = make_backend(cfg.backend, params, seed)
    for n in sizes:
        c = cfg.with_overrides(seq_len=n, model_dim=n, heads=1, ffn_dim=2 * n)
        lc = c.layer_config()
        rng = np.random.default_rng([seed, n])
        w = LayerWeights.random(rng, n, 2 * n)
        X = rng.normal(size=(n, n))
        X /= np.sqrt(np.mean(X * X, axis=1, keepdims=True))
        pm = pack_columns(be, X)
        for k in kernels:
            be.counters.reset()
            tracker = LevelTracker(be.counters)
            t0 = time.perf_counter()
            out = run_kernel(be, k, pm, w, lc, tracker)
            wall = time.perf_counter() - t0
            ops = be.counters.snapshot().as_dict()
            err = float(np.max(np.abs(unpack(be, out) - reference_kernel(k, X, w, lc))))
            rows.append({"kernel": k, "s": n, "d": n, "m": out.cols_n, **{o: ops[o] for o in
                         ("add", "sub", "mult", "pmult", "rot", "refresh")},
                         "levels": pm.level - out.level if k != "rmsnorm" else out.depth - pm.depth,
                         "wall_s": round(wall, 4), "max_err": err})
    return rows


def format_bench(rows: list[dict]) -> str:
    cols = ["kernel", "s", "d", "m", "add", "sub", "mult", "pmult", "rot", "refresh", "levels", "wall_s", "max_err"]
    head = f"{'kernel':<10}" + "".join(f"{c:>9}" for c in cols[1:-2]) + f"{'wall_s':>10}{'max_err':>11}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['kernel']:<10}" + "".join(f"{r[c]:>9}" for c in cols[1:-2])
                     + f"{r['wall_s']:>10.3f}{r['max_err']:>11.2e}")
    return "\n".join(lines)


def cmd_bench(args) -> int:
    cfg = _config(args)
    kernels = [args.kernel] if args.kernel else list(BENCH_KERNELS)
    sizes = [int(x) for x in args.sizes.split(",")]
    rows = bench_rows(cfg, kernels, sizes, cfg.seed)
    text = format_bench(rows) if args.report == "table" else "\n".join(json.dumps(r) for r in rows)
    if args.report_out:
        Path(args.report_out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_serve(args) -> int:
    cfg = _config(args)
    kind, keys = load_keys(args.keys)
    oracle = None
    if kind == "ckks" and args.oracle_keys:
        oracle = RefreshOracle(load_keys(args.oracle_keys)[1])
    service = InferenceService(cfg, load_weights(args.weights), keys.public_view(), kind, oracle)
    with InferenceServer(parse_address(args.listen), service) as srv:
        log.info("serving %s on %s", cfg.kernel, srv.address)
        print(srv.address, flush=True)
        if args.max_requests:
            # Non-daemon handler threads are joined when the block exits.
            srv.daemon_threads = False
            for _ in range(args.max_requests):
                srv.handle_request()
        else:
            srv.serve_forever()
    return 0


def cmd_client(args) -> int:
    cfg = _config(args)
    be = _full_backend(args)
    Y, resp = run_client(args.connect, be, cfg, np.load(args.input), timeout=args.timeout)
    np.save(args.out, Y)
    if args.report_out:
        Path(args.report_out).write_text(resp.report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults to the desk-scale layer)")
    common.add_argument("--backend", choices=("clear", "ckks"))
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cipherlayer", description="Encrypted ternary-transformer inference.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-config", cmd_gen_config, "write the effective run configuration as JSON")
    sp.add_argument("--kernel", choices=KERNELS)
    sp.add_argument("--out", required=True)

    sp = add("keygen", cmd_keygen, "generate key files")
    sp.add_argument("--out", required=True, help="full key file (with secret)")
    sp.add_argument("--eval-out", help="evaluation-only key file for the server")

    sp = add("gen-weights", cmd_gen_weights, "write a random ternary layer")
    sp.add_argument("--out", required=True)

    sp = add("encrypt", cmd_encrypt, "pack and encrypt a .npy matrix")
    sp.add_argument("--keys", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--level", type=int)

    sp = add("decrypt", cmd_decrypt, "decrypt a packed matrix into .npy")
    sp.add_argument("--keys", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("infer", cmd_infer, "evaluate a kernel on an encrypted input file")
    sp.add_argument("--kernel", choices=KERNELS)
    sp.add_argument("--keys", required=True, help="key file; only the evaluation keys are used")
    sp.add_argument("--oracle-keys", help="full key file backing the refresh oracle (ckks)")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", choices=("table", "records"), default="table")
    sp.add_argument("--report-out")

    sp = add("bench", cmd_bench, "sweep kernel sizes and report op counts")
    sp.add_argument("--kernel", choices=BENCH_KERNELS)
    sp.add_argument("--sizes", default="4,8", help="comma-separated grid of sizes")
    sp.add_argument("--report", choices=("table", "records"), default="table")
    sp.add_argument("--report-out")

    sp = add("serve", cmd_serve, "answer one inference per connection")
    sp.add_argument("--kernel", choices=KERNELS)
    sp.add_argument("--listen", default="127.0.0.1:7341")
    sp.add_argument("--keys", required=True)
    sp.add_argument("--oracle-keys")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--max-requests", type=int, default=0, help="exit after this many requests (0 = forever)")

    sp = add("client", cmd_client, "encrypt, send, receive and decrypt")
    sp.add_argument("--kernel", choices=KERNELS)
    sp.add_argument("--connect", default="127.0.0.1:7341")
    sp.add_argument("--keys", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--timeout", type=float)
    sp.add_argument("--report-out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
