"""``bbt`` command-line pipeline: calibrate, transform, quantize, verify, fuzz, sweep.

Exit codes: 0 success, 1 verification floor exceeded, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from bbtquant import __version__
from bbtquant.calib import DegenerateCalibrationError
from bbtquant.containers import ContainerError, read_bbtt, read_manifest, write_bbtq, write_bbtt
from bbtquant.experiments import ALPHA_GRID, BITS_GRID, FixtureConfig, fixture_config_dict, sweep
from bbtquant.fuzz import FUZZ_MODES, floor_for, fuzz_invariance
from bbtquant.modelfile import (
    MissingTensorError,
    block_from_tensors,
    load_model,
    load_quantized_model,
    save_model,
)
from bbtquant.quant import UnsupportedBitWidthError, dequantize, quantize_groupwise, signround_refine
from bbtquant.reports import dumps, layer_entry, make_report, validate
from bbtquant.synth import FAMILIES, BlockSpec, build_block, collect_taps, derive_rng, forward, random_inputs, rel_err
from bbtquant.transform import (
    ATTN_ALLOWLIST,
    BUGGY_ATTN_ALLOWLIST,
    MODES,
    BlockTransform,
    UnsupportedModeError,
    block_statistics,
    prepare_block,
)

EXIT_OK, EXIT_FLOOR, EXIT_USAGE = 0, 1, 2
SEED_ENV = "BBT_SEED"
RECORD_FORMAT = "bbt-transform-record"


class UsageError(Exception):
    pass


_CONFIG_ERRORS = (
    UsageError,
    UnsupportedModeError,
    UnsupportedBitWidthError,
    DegenerateCalibrationError,
    MissingTensorError,
    ContainerError,
    KeyError,
    OSError,
    ValueError,
)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def resolve_seed(flag: int | None) -> tuple[int, str]:
    if flag is not None:
        if flag < 0:
            raise UsageError(f"--seed must be nonnegative, got {flag}")
        return flag, "flag"
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0, "default"
    try:
        seed = int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    if seed < 0:
        raise UsageError(f"{SEED_ENV} must be nonnegative, got {seed}")
    return seed, "env"


def _sub_seed(seed: int, *keys) -> int:
    return int(derive_rng(seed, *keys).integers(2**31))


def _write_report(report: dict, path) -> None:
    Path(path).write_text(dumps(report), encoding="utf-8")


def _emit(report: dict, args, default_path=None) -> None:
    path = args.report or default_path
    if path is None:
        sys.stdout.write(dumps(report))
    else:
        _write_report(report, path)


def _same_spec(a: dict, b: dict, what: str) -> None:
    if a.get("block_spec") != b.get("block_spec"):
        raise UsageError(f"{what}: block specs differ ({a.get('block_spec')} vs {b.get('block_spec')})")


def _load_data(path):
    tensors, _ = read_bbtt(path)
    x = tensors.get("hidden_states")
    if x is None or x.size == 0:
        raise DegenerateCalibrationError(f"degenerate calibration: {path} holds no hidden states")
    pos = tensors.get("positions")
    pos = None if pos is None else pos.astype(np.int64)
    return x, pos


def _load_record(path) -> tuple[dict, BlockTransform]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != RECORD_FORMAT:
        raise UsageError(f"{path}: not a transform record")
    validate(doc, "transform_record")
    return doc, BlockTransform.from_dict(doc["transform"])


def _record_doc(block, bt: BlockTransform) -> dict:
    doc = {
        "format": RECORD_FORMAT,
        "version": 1,
        "block_spec": block.spec.to_dict(),
        "transform": bt.to_dict(),
    }
    if block.matrix_norms:
        doc["matrix_norms"] = {
            name: {"gamma": m.gamma.tolist(), "U": m.U.tolist(), "eps": m.eps, "symmetric": m.symmetric}
            for name, m in sorted(block.matrix_norms.items())
        }
    return json.loads(json.dumps(doc))


def _is_fp64(manifest: dict) -> bool:
    dtypes = {e.get("dtype", "f32") for e in manifest["tensors"] if e.get("kind", "raw") == "raw"}
    return dtypes == {"f64"}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_build_model(args, config) -> int:
    spec = BlockSpec(
        family=args.family, d=args.d, n_heads=args.heads, n_kv_heads=args.kv_heads, d_ff=args.d_ff,
        n_experts=args.experts, top_k=args.top_k, has_shared_expert=not args.no_shared_expert,
        seed=config["seed"], rope_base=args.rope_base,
    )
    block = build_block(spec)
    save_model(args.out, block, dtype=args.dtype)
    report = make_report("build-model", config, {"block_spec": spec.to_dict()})
    _emit(report, args, f"{args.out}.report.json")
    return EXIT_OK


def cmd_make_data(args, config) -> int:
    block, _ = load_model(args.model)
    x, pos = random_inputs(block.spec, _sub_seed(config["seed"], "make-data"), T=args.tokens, batch=args.batch)
    if args.constant is not None:
        x = np.full_like(x, args.constant)
    write_bbtt(args.out, {"hidden_states": x, "positions": pos.astype(np.float64)},
               {"kind": "calib_data", "block_spec": block.spec.to_dict()}, dtype="f64")
    report = make_report("make-data", config, {"shape": list(x.shape)})
    _emit(report, args, f"{args.out}.report.json")
    return EXIT_OK


def cmd_calibrate(args, config) -> int:
    block, meta = load_model(args.model)
    x, pos = _load_data(args.data)
    if x.shape[-1] != block.spec.d:
        raise UsageError(f"data width {x.shape[-1]} does not match model width {block.spec.d}")
    stats = block_statistics(block, collect_taps(block, x, pos))
    n_tokens = int(np.prod(x.shape[:-1]))
    warnings = []
    if n_tokens < block.spec.d_h:
        warnings.append(f"{n_tokens} calibration tokens < head dim {block.spec.d_h}; covariances are rank deficient")
    write_bbtt(args.out, stats, {"kind": "calib_stats", "block_spec": meta["block_spec"], "n_tokens": n_tokens},
               dtype="f64")
    layers = [
        layer_entry(key[len("rho.spectral."):], max_rho=float(v.max()), d_pad=int(v.shape[0]))
        for key, v in sorted(stats.items()) if key.startswith("rho.spectral.")
    ]
    report = make_report("calibrate", config, {"layers": layers, "n_tokens": n_tokens, "warnings": warnings})
    _emit(report, args, f"{args.out}.report.json")
    return EXIT_OK


def cmd_transform(args, config) -> int:
    block, meta = load_model(args.model)
    if "transform_mode" in meta:
        raise UsageError(f"{args.model} is already transformed (mode {meta['transform_mode']})")
    stats, smeta = read_bbtt(args.stats)
    _same_spec(meta, smeta, "model and stats")
    allowlist = BUGGY_ATTN_ALLOWLIST if args.allowlist == "buggy" else ATTN_ALLOWLIST
    out, bt = prepare_block(block, args.mode, stats, args.alpha, allowlist=allowlist,
                            tie_query_heads=args.tie_query_heads)
    save_model(args.out, out, dtype=args.dtype, transform_mode=args.mode, alpha=args.alpha)
    doc = _record_doc(out, bt)
    validate(doc, "transform_record")
    record_path = args.record or f"{args.out}.record.json"
    Path(record_path).write_text(dumps(doc), encoding="utf-8")

    layers = []
    for name, rec in sorted(bt.records.items()):
        layers.append(layer_entry(
            name, mode=args.mode, alpha=args.alpha, d_in=rec.d_in, d_pad=rec.d_pad,
            scale_min=float(rec.scales.min()), scale_max=float(rec.scales.max()),
            absorbed_consumers=rec.absorbed_consumers, skipped_consumers=rec.skipped_consumers,
        ))
    report = make_report("transform", config, {"layers": layers})
    _emit(report, args, f"{args.out}.report.json")
    return EXIT_OK


def _rel_output_err(X, W, W_hat) -> float:
    ref = np.linalg.norm(X @ W.T)
    diff = np.linalg.norm(X @ (W_hat - W).T)
    if ref == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / ref)


def cmd_quantize(args, config) -> int:
    if args.refine < 0:
        raise UsageError("--refine must be nonnegative")
    if args.group < 1:
        raise UsageError("--group must be positive")
    tensors, meta = read_bbtt(args.model)
    mode = meta.get("transform_mode")
    alpha = meta.get("alpha")
    seed = config["seed"]

    block = block_from_tensors(tensors, meta) if "block_spec" in meta else None
    hooks = None
    if args.record:
        rec_doc, bt = _load_record(args.record)
        if bt.mode != mode:
            raise UsageError(f"record mode {bt.mode!r} does not match model mode {mode!r}")
        hooks = bt.hooks()
    elif mode != "spectral":
        hooks = {}

    taps = {}
    if block is not None and hooks is not None:
        if args.data:
            x, pos = _load_data(args.data)
        else:
            x, pos = random_inputs(block.spec, _sub_seed(seed, "quantize-calib"), T=16, batch=4)
        taps = collect_taps(block, x, pos, hooks)
    elif args.refine and block is not None:
        raise UsageError("refining a spectral-mode model needs its --record for the input hook")

    quantized, raw, layers = {}, {}, []
    for name in sorted(tensors):
        arr = tensors[name]
        if not (name.endswith(".weight") and arr.ndim >= 2):
            raw[name] = arr
            continue
        layer = name[: -len(".weight")]
        W = arr.reshape(-1, arr.shape[-1])
        X = taps.get(layer)
        if X is None or X.shape[-1] != W.shape[1]:
            X = derive_rng(seed, "quantize-probe", layer).standard_normal((64, W.shape[1]))
        X = X.reshape(-1, W.shape[1])
        qt = quantize_groupwise(W, args.bits, args.group)
        if args.refine:
            qt = signround_refine(qt, W, X, args.refine)
        W_hat = dequantize(qt)
        quantized[name] = (qt, arr.shape)
        layers.append(layer_entry(
            layer, rel_output_err=_rel_output_err(X, W, W_hat), quant_mse=float(np.mean((W_hat - W) ** 2)),
            bits=args.bits, group_size=args.group, mode=mode, alpha=alpha,
        ))

    out_meta = dict(meta)
    out_meta["quantization"] = {"bits": args.bits, "group_size": args.group, "refine_passes": args.refine}
    write_bbtq(args.out, quantized, raw, out_meta, raw_dtype=args.dtype)

    proxy = None
    if block is not None and hooks is not None:
        deq, _ = load_quantized_model(args.out)
        x, pos = random_inputs(block.spec, _sub_seed(seed, "quantize-eval"), T=16, batch=4)
        proxy = rel_err(forward(deq, x, pos, hooks=hooks), forward(block, x, pos, hooks=hooks))
    report = make_report("quantize", config, {"layers": layers, "proxy_metric": proxy})
    _emit(report, args, f"{args.out}.report.json")
    return EXIT_OK


def cmd_verify(args, config) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    vanilla, vmeta = load_model(args.vanilla)
    manifest = read_manifest(args.transformed)
    quantized = manifest["format"] == "BBTQ"
    transformed, tmeta = (load_quantized_model if quantized else load_model)(args.transformed)
    rec_doc, bt = _load_record(args.record)
    model_mode = tmeta.get("transform_mode")
    if model_mode != bt.mode:
        raise UsageError(f"record mode {bt.mode!r} does not match transformed model mode {model_mode!r}")
    _same_spec(vmeta, tmeta, "vanilla and transformed models")
    if rec_doc["block_spec"] != vmeta["block_spec"]:
        raise UsageError("record block spec does not match the vanilla model")

    precision = "fp64" if _is_fp64(manifest) and _is_fp64(read_manifest(args.vanilla)) else "fp32"
    if args.floor is not None:
        floor = args.floor
    elif quantized:
        floor = None  # quantization error is reported, not gated
    else:
        floor = floor_for(bt.mode, precision)

    hooks = bt.hooks()
    worst = 0.0
    for t in range(args.trials):
        x, pos = random_inputs(vanilla.spec, _sub_seed(config["seed"], "verify", t))
        worst = max(worst, rel_err(forward(transformed, x, pos, hooks=hooks), forward(vanilla, x, pos)))
    passed = floor is None or worst <= floor
    metrics = {
        "layers": [layer_entry("block", rel_output_err=worst, mode=bt.mode, alpha=bt.alpha)],
        "max_rel_err": worst,
        "floor": floor,
        "passed": passed,
        "precision": precision,
        "quantized": quantized,
        "trials": args.trials,
        "proxy_metric": worst if quantized else None,
    }
    _emit(make_report("verify", config, metrics), args)
    if not passed:
        print(f"bbt verify: max rel err {worst:.3e} exceeds floor {floor:.1e}", file=sys.stderr)
        return EXIT_FLOOR
    return EXIT_OK


def cmd_fuzz(args, config) -> int:
    specs = [
        BlockSpec(family=fam, d=args.d, n_heads=args.heads, n_kv_heads=args.kv_heads, d_ff=args.d_ff,
                  seed=_sub_seed(config["seed"], "fuzz-spec", fam, i))
        for fam in args.families for i in range(args.spec_seeds)
    ]
    report = fuzz_invariance(specs, args.modes, args.trials, config["seed"], args.precision, args.alpha)
    body = report.to_dict()
    validate(body, "fuzz_metrics")
    _emit(make_report("fuzz", config, body), args)
    if report.failures:
        for e in report.failures:
            print(f"bbt fuzz: {e.family}/{e.mode} rel err {e.max_rel_err:.3e} > floor {e.floor:.1e}",
                  file=sys.stderr)
        return EXIT_FLOOR
    return EXIT_OK


def cmd_sweep(args, config) -> int:
    values = args.values
    if values is None:
        values = list(ALPHA_GRID if args.axis == "alpha" else BITS_GRID)
    if args.axis == "bits":
        values = [int(v) for v in values]
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    cfg = FixtureConfig(d_in=args.d_in, d_out=args.d_out, n_samples=args.samples, exponent=args.exponent,
                        group_size=args.group, refine_passes=args.refine)
    seeds = [_sub_seed(config["seed"], "sweep", i) for i in range(args.seeds)]
    rows = sweep(args.axis, values, seeds, bits=args.bits, alpha=args.alpha, cfg=cfg)
    metrics = {"axis": args.axis, "rows": rows, "fixture": fixture_config_dict(cfg)}
    _emit(make_report("sweep", config, metrics), args)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _add_geometry(p, d=64):
    p.add_argument("--d", type=int, default=d, help="hidden width")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=128)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help=f"master seed (falls back to ${SEED_ENV}, then 0)")
    common.add_argument("--report", default=None, help="where to write the JSON report")

    parser = argparse.ArgumentParser(prog="bbt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bbt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-model", parents=[common], help="write a synthetic block as a model file")
    p.add_argument("--family", choices=FAMILIES, default="llama")
    _add_geometry(p)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--no-shared-expert", action="store_true")
    p.add_argument("--rope-base", type=float, default=10000.0)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_model)

    p = sub.add_parser("make-data", parents=[common], help="write seeded calibration hidden states")
    p.add_argument("model")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--constant", type=float, default=None, help="fill every entry with this value")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("calibrate", parents=[common], help="spectral energies and covariances")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("transform", parents=[common], help="apply a math-invariant transform")
    p.add_argument("model")
    p.add_argument("stats")
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--allowlist", choices=("fixed", "buggy"), default="fixed",
                   help="attention consumers absorbing the input norm scales")
    p.add_argument("--tie-query-heads", action="store_true")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--record", default=None, help="sidecar path (default <out>.record.json)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("quantize", parents=[common], help="group-wise low-bit quantization to BBTQ")
    p.add_argument("model")
    p.add_argument("--bits", type=int, default=2)
    p.add_argument("--group", type=int, default=64)
    p.add_argument("--refine", type=int, default=0, help="greedy rounding refinement passes")
    p.add_argument("--data", default=None, help="calibration data for refinement and layer errors")
    p.add_argument("--record", default=None, help="transform record (needed for spectral input hooks)")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32", help="dtype of unquantized tensors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("verify", parents=[common], help="check transformed vs vanilla block outputs")
    p.add_argument("vanilla")
    p.add_argument("transformed")
    p.add_argument("--record", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--floor", type=float, default=None, help="override the mode floor")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fuzz", parents=[common], help="invariance fuzzing over block families")
    p.add_argument("--families", nargs="+", choices=FAMILIES, default=list(FAMILIES))
    p.add_argument("--modes", nargs="+", choices=FUZZ_MODES, default=list(FUZZ_MODES))
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--spec-seeds", type=int, default=1)
    p.add_argument("--precision", choices=("fp32", "fp64"), default="fp32")
    p.add_argument("--alpha", type=float, default=0.5)
    _add_geometry(p)
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("sweep", parents=[common], help="alpha or bit-width sweep on the anisotropic fixture")
    p.add_argument("--axis", choices=("alpha", "bits"), required=True)
    p.add_argument("--values", type=float, nargs="+", default=None)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--bits", type=int, default=2)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--group", type=int, default=64)
    p.add_argument("--refine", type=int, default=0)
    p.add_argument("--d-in", type=int, default=256)
    p.add_argument("--d-out", type=int, default=128)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--exponent", type=float, default=1.5)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        seed, source = resolve_seed(args.seed)
        config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        config.update(seed=seed, seed_source=source, tool_version=__version__)
        return args.func(args, config)
    except _CONFIG_ERRORS as exc:
        print(f"bbt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
