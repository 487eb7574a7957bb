"""Command-line driver.

Subcommands: init-model, quantize, drift, generate, length-control, calib,
stats, sweep. Exit code 0 on success; failures print one machine-readable
``error: <Class>: <message>`` line on stderr and exit nonzero.
"""

import argparse
import json
import sys

import numpy as np

from . import calibration, checkpoint, harness
from .errors import QuantLabError
from .quantrun import QuantPlan, prepare_runtime
from .rng import make_rng
from .toymodel import ToyConfig, ToyModel, generate, init_model, load_model, save_model
from .weightquant import (
    GptqConfig,
    awq_fold,
    awq_search,
    default_weight_spec,
    gptq_quantize,
    rtn_quantize_weights,
    dequant_loss,
)


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _plan_from_args(args) -> QuantPlan:
    kwargs = {}
    if getattr(args, "method", None):
        w, a, kv = (int(x) for x in args.plan.split("-"))
        if args.method in ("rtn", "gptq", "awq"):
            kwargs["w_method"] = args.method
        elif args.method in ("smoothquant", "rotate", "flatquant", "mxfp4"):
            kwargs["wa_method"] = args.method
        elif args.method in ("per_token", "kvquant_star", "rotated_per_token"):
            kwargs["kv_method"] = args.method
        else:
            raise ValueError(f"unknown method {args.method!r}")
    if getattr(args, "group_size", None):
        kwargs["group_size"] = args.group_size
    return QuantPlan.from_bits_string(args.plan, **kwargs)


def _load_calib(args, model):
    if not getattr(args, "calib", None):
        return None
    rng = make_rng(args.seed)
    seq_len = args.calib_len or 64
    cs = calibration.load_calibration(args.calib, seq_len=seq_len, count=8, rng=rng)
    return cs.sequences


def cmd_init_model(args):
    cfg_kwargs = {}
    if args.config:
        with open(args.config) as f:
            cfg_kwargs = json.load(f)
    cfg = ToyConfig(**cfg_kwargs)
    injection = None
    if args.inject_k_bias:
        layer, channel, mag = args.inject_k_bias.split(":")
        injection = (int(layer), int(channel), float(mag))
    m = init_model(cfg, make_rng(args.seed), k_bias_outlier=injection)
    save_model(m, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_quantize(args):
    model = load_model(args.model)
    plan = _plan_from_args(args)
    calib = _load_calib(args, model)
    spec = default_weight_spec(plan.w_bits, plan.group_size)
    quantized = {}
    from .quantrun import _weight_linear_names, capture_activations, linear_input_site

    rec = None
    if plan.w_method in ("gptq", "awq"):
        if calib is None:
            raise QuantLabError("gptq/awq need --calib")
        rec = capture_activations(model, calib)
    for name in _weight_linear_names(model, plan.include_lm_head):
        w = model.tensors[name].astype(np.float64)
        if plan.w_method == "rtn":
            qt = rtn_quantize_weights(w, spec)
        elif plan.w_method == "gptq":
            x = rec.matrix(linear_input_site(name)).T
            qt = gptq_quantize(w, x, GptqConfig(spec=spec))
        else:
            x = rec.matrix(linear_input_site(name)).T
            res = awq_search(w, x, spec)
            w_scaled, inv_s = awq_fold(w, res.scales)
            qt = rtn_quantize_weights(w_scaled, spec)
            model.aux[f"{name}.awq_inv_scales"] = inv_s.astype(np.float32)
        quantized[name] = qt
        if rec is not None:
            x = rec.matrix(linear_input_site(name)).T
            print(f"{name}: proxy_loss={dequant_loss(qt, w, x):.6g}")
        else:
            print(f"{name}: quantized {qt.shape} at {plan.w_bits} bits")
    checkpoint.save_checkpoint(model, plan.to_dict(), quantized, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_drift(args):
    model = load_model(args.model)
    plan = _plan_from_args(args)
    rng = make_rng(args.seed)
    probe = list(rng.integers(0, model.config.vocab_size, size=args.probe_len))
    cfg = harness.ExperimentConfig(plan=plan, probe_tokens=[int(t) for t in probe],
                                   calib_sequences=_load_calib(args, model),
                                   seed=args.seed)
    rep = harness.run_drift(model, cfg)
    harness.write_drift_csv(rep, args.out)
    print(f"final_disagreement={rep.final_disagreement} "
          f"first_divergence={rep.first_divergence}")
    print(f"wrote {args.out}")
    return 0


def cmd_generate(args):
    model = load_model(args.model)
    plan = _plan_from_args(args)
    rng = make_rng(args.seed)
    runtime = None
    if not plan.passthrough:
        runtime = prepare_runtime(model, plan, _load_calib(args, model))
    prompt = [int(t) for t in args.prompt.split()]
    seq = generate(model, prompt, max_new=args.max_new,
                   temperature=args.temperature, top_p=args.top_p, rng=rng,
                   runtime=runtime)
    line = " ".join(str(t) for t in seq)
    with open(args.out, "w") as f:
        f.write(line + "\n")
    print(line)
    return 0


def cmd_length_control(args):
    model = load_model(args.model)
    plan = _plan_from_args(args)
    lc = harness.LengthControl(mode=args.mode, budget=args.budget,
                               max_waits=args.max_waits)
    cfg = harness.ExperimentConfig(plan=plan, length_control=lc, seed=args.seed,
                                   n_runs=args.runs,
                                   calib_sequences=_load_calib(args, model))
    rep = harness.run_length_control(model, cfg)
    with open(args.out, "w") as f:
        json.dump({"schema_version": harness.SCHEMA_VERSION,
                   "meta": rep.meta,
                   "thinking_tokens": rep.thinking_tokens,
                   "total_tokens": rep.total_tokens,
                   "mean_thinking": rep.mean_thinking,
                   "median_thinking": rep.median_thinking}, f, indent=2)
    print(f"mean_thinking={rep.mean_thinking:.2f}")
    print(f"wrote {args.out}")
    return 0


def cmd_calib(args):
    model = load_model(args.model)
    rng = make_rng(args.seed)
    prompts = [[0]]
    cs = calibration.self_generate(model, prompts, seq_len=args.calib_len or 64,
                                   count=args.count, rng=rng)
    calibration.write_sequences(cs.sequences, args.out)
    print(f"wrote {args.out} ({cs.count} sequences, domain={cs.domain_tag})")
    return 0


def cmd_stats(args):
    model = load_model(args.model)
    rng = make_rng(args.seed)
    if args.calib:
        cs = calibration.load_calibration(args.calib, seq_len=args.calib_len or 64,
                                          count=8, rng=rng)
    else:
        seqs = [[int(t) for t in rng.integers(0, model.config.vocab_size, size=64)]
                for _ in range(4)]
        cs = calibration.CalibrationSet(seqs, domain_tag="random")
    stats = calibration.capture_channel_stats(model, cs, [args.site])
    calibration.stats_to_csv(stats, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_sweep(args):
    model = load_model(args.model)
    with open(args.config) as f:
        spec = json.load(f)
    rng = make_rng(args.seed)
    probe = [int(t) for t in rng.integers(0, model.config.vocab_size,
                                          size=spec.get("probe_len", 64))]
    cfgs = []
    for entry in spec.get("runs", []):
        plan = QuantPlan.from_bits_string(
            entry["plan"], **{k: v for k, v in entry.items() if k != "plan"})
        cfgs.append(harness.ExperimentConfig(plan=plan, probe_tokens=probe,
                                             seed=args.seed))
    rows = harness.run_sweep(model, cfgs)
    if args.format == "json":
        harness.write_sweep_json(rows, args.out)
    else:
        harness.write_sweep_csv(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quantlab")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="create a seeded toy model file")
    p.add_argument("--config", help="JSON file of ToyConfig overrides")
    p.add_argument("--inject-k-bias", help="layer:channel:magnitude")
    _add_common(p)
    p.set_defaults(fn=cmd_init_model)

    def model_plan(p, plan_required=True):
        p.add_argument("--model", required=True)
        p.add_argument("--plan", required=plan_required, default="16-16-16")
        p.add_argument("--method")
        p.add_argument("--group-size", type=int, dest="group_size")
        p.add_argument("--calib")
        p.add_argument("--calib-len", type=int, dest="calib_len")

    p = sub.add_parser("quantize", help="write a quantized checkpoint")
    model_plan(p)
    p.add_argument("--w-bits", type=int, dest="w_bits")
    _add_common(p)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("drift", help="teacher-forced drift report")
    model_plan(p)
    p.add_argument("--probe-len", type=int, default=128)
    _add_common(p)
    p.set_defaults(fn=cmd_drift)

    p = sub.add_parser("generate", help="sample a continuation")
    model_plan(p, plan_required=False)
    p.add_argument("--prompt", default="0")
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--top-p", type=float, default=0.95, dest="top_p")
    _add_common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("length-control", help="budget-forced generation lengths")
    model_plan(p, plan_required=False)
    p.add_argument("--mode", choices=["off", "suppress", "promote"],
                   default="suppress")
    p.add_argument("--budget", type=int, default=32)
    p.add_argument("--max-waits", type=int, default=8, dest="max_waits")
    p.add_argument("--runs", type=int, default=16)
    _add_common(p)
    p.set_defaults(fn=cmd_length_control)

    p = sub.add_parser("calib", help="self-generate calibration data")
    p.add_argument("--model", required=True)
    p.add_argument("--calib-len", type=int, dest="calib_len")
    p.add_argument("--count", type=int, default=8)
    _add_common(p)
    p.set_defaults(fn=cmd_calib)

    p = sub.add_parser("stats", help="channel statistics CSV for one site")
    p.add_argument("--model", required=True)
    p.add_argument("--site", required=True)
    p.add_argument("--calib")
    p.add_argument("--calib-len", type=int, dest="calib_len")
    _add_common(p)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("sweep", help="run a grid of plans from a JSON config")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    _add_common(p)
    p.set_defaults(fn=cmd_sweep)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (QuantLabError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
