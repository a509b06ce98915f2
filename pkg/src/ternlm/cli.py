"""Command-line entry point tying the toolkit together.

Subcommands: quantize, infer, eval-ppl, train-toy, estimate, bench.
Exit codes: 0 success, 1 usage error, 2 data/validation error. Output files
are written atomically (temp file + rename), stdout is line-oriented.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import TernlmError
from .ternary_format import DTYPE_TERNARY, load_model, save_model

FP16_BYTES_PER_PARAM = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 for usage problems, not argparse's default 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="ternlm", description="Desk-scale ternary-weight LLM toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", help="quantize an F32 model's block linears to ternary")
    q.add_argument("--input", required=True, help="F32 model file")
    q.add_argument("--output", required=True, help="quantized model file to write")
    q.set_defaults(func=cmd_quantize)

    inf = sub.add_parser("infer", help="greedy decoding from a prompt")
    inf.add_argument("--model", required=True)
    inf.add_argument("--prompt", required=True, help="prompt text (raw UTF-8 bytes)")
    inf.add_argument("--max-new", type=int, default=64)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval-ppl", help="perplexity of a text file under a model")
    ev.add_argument("--model", required=True)
    ev.add_argument("--text", required=True)
    ev.set_defaults(func=cmd_eval_ppl)

    tt = sub.add_parser("train-toy", help="train a toy ternary model on raw bytes")
    tt.add_argument("--corpus", required=True)
    tt.add_argument("--steps", type=int, required=True)
    tt.add_argument("--seed", type=int, default=0)
    tt.add_argument("--out", required=True, help="quantized model file to write")
    tt.add_argument("--out-fp32", default=None, help="also write the full-precision latents")
    tt.add_argument("--hidden", type=int, default=128)
    tt.add_argument("--layers", type=int, default=2)
    tt.add_argument("--heads", type=int, default=4)
    tt.add_argument("--ffn-dim", type=int, default=344)
    tt.add_argument("--max-seq", type=int, default=256)
    tt.add_argument("--seq-len", type=int, default=128)
    tt.add_argument("--batch-size", type=int, default=8)
    tt.add_argument("--lr", type=float, default=3e-3)
    tt.add_argument("--warmup", type=int, default=100)
    tt.add_argument("--quantize-head", action="store_true")
    tt.set_defaults(func=cmd_train_toy)

    es = sub.add_parser("estimate", help="analytic energy/memory report for a model size")
    grp = es.add_mutually_exclusive_group(required=True)
    grp.add_argument("--size", help="shipped size label, e.g. 3B")
    grp.add_argument("--config", help="path to a config JSON file")
    es.add_argument("--tokens", type=int, default=512)
    es.add_argument("--json", dest="json_path", default=None, help="write the report as JSON")
    es.add_argument("--constants", default=None, help="energy constants JSON file")
    es.set_defaults(func=cmd_estimate)

    be = sub.add_parser("bench", help="micro-benchmark ternary vs float matmul")
    be.add_argument("--shape", required=True, help="m,k,n (tokens, in_features, out_features)")
    be.add_argument("--reps", type=int, default=5)
    be.set_defaults(func=cmd_bench)

    return p


def cmd_quantize(args) -> int:
    from .transformer import block_linear_names, quantize_model

    model = load_model(args.input)
    quantized, gammas = quantize_model(model)
    save_model(quantized, args.output)
    for name in block_linear_names(model.config):
        print(f"gamma {name} {gammas[name]:.10g}")
    fp16_bytes = 0
    packed_bytes = 0
    for rec in quantized.tensors:
        if rec.dtype == DTYPE_TERNARY:
            fp16_bytes += FP16_BYTES_PER_PARAM * rec.dims[0] * rec.dims[1]
            packed_bytes += len(rec.payload)
    print(f"block-linear weight bytes: {packed_bytes} "
          f"({fp16_bytes / packed_bytes:.2f}x smaller than 16-bit storage)")
    print(f"wrote {args.output}")
    return 0


def cmd_infer(args) -> int:
    from .transformer import greedy_decode, model_file_to_weights

    weights = model_file_to_weights(load_model(args.model))
    prompt = list(args.prompt.encode("utf-8"))
    generated = greedy_decode(weights, prompt, args.max_new)
    print("tokens:", " ".join(str(t) for t in generated))
    print("text:", bytes(generated).decode("utf-8", errors="replace"))
    return 0


def cmd_eval_ppl(args) -> int:
    from .transformer import model_file_to_weights, stream_perplexity

    weights = model_file_to_weights(load_model(args.model))
    with open(args.text, "rb") as f:
        data = f.read()
    ppl = stream_perplexity(weights, list(data))
    print(f"{ppl:.6f}")
    return 0


def cmd_train_toy(args) -> int:
    from .config import TransformerConfig
    from .training import TrainConfig, train_toy

    config = TransformerConfig(
        hidden=args.hidden,
        layers=args.layers,
        heads=args.heads,
        ffn_dim=args.ffn_dim,
        max_seq=args.max_seq,
    )
    train = TrainConfig(
        steps=args.steps,
        learning_rate=args.lr,
        seed=args.seed,
        batch_size=args.batch_size,
        seq_len=args.seq_len,
        warmup_steps=args.warmup,
        quantize_head=args.quantize_head,
        log_every=100,
    )
    with open(args.corpus, "rb") as f:
        corpus = f.read()
    result = train_toy(config, corpus, train)
    if result.loss_trace:
        print(f"final loss {result.loss_trace[-1]:.4f} after {train.steps} steps")
    save_model(result.to_quantized_model_file(), args.out)
    print(f"wrote {args.out}")
    if args.out_fp32:
        save_model(result.to_fp32_model_file(), args.out_fp32)
        print(f"wrote {args.out_fp32}")
    return 0


def cmd_estimate(args) -> int:
    from .config import TransformerConfig
    from .costmodel import EnergyConstants, cost_report, load_size_config

    constants = EnergyConstants.from_json_file(args.constants) if args.constants else None
    if args.size is not None:
        try:
            config = load_size_config(args.size)
        except KeyError:
            from .costmodel import available_sizes

            raise _UsageError(
                f"unknown size label {args.size!r}; available: {', '.join(available_sizes())}"
            )
        label = args.size
    else:
        with open(args.config, "r", encoding="utf-8") as f:
            config = TransformerConfig.from_json(f.read())
        label = args.config
    report = cost_report(config, label, tokens=args.tokens, constants=constants)
    print(report.to_text_table())
    if args.json_path:
        with open(args.json_path, "w", encoding="utf-8") as f:
            json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"wrote {args.json_path}")
    return 0


def cmd_bench(args) -> int:
    from .kernels import kernel_bench

    try:
        m, k, n = (int(x) for x in args.shape.split(","))
    except ValueError:
        raise _UsageError(f"--shape must be m,k,n integers, got {args.shape!r}")
    report = kernel_bench(in_features=k, out_features=n, tokens=m, reps=args.reps)
    print(f"shape m={m} k={k} n={n}  elements {report['elements']}")
    print(f"ternary: {report['ternary_median_s']:.6f} s median, "
          f"{report['ternary_elements_per_s']:.3e} elements/s")
    print(f"f32:     {report['f32_median_s']:.6f} s median, "
          f"{report['f32_elements_per_s']:.3e} elements/s")
    ratio = report["weight_bytes_fp16"] / report["weight_bytes_ternary"]
    print(f"weight bytes: ternary {report['weight_bytes_ternary']}, "
          f"fp16 {report['weight_bytes_fp16']} ({ratio:.2f}x), "
          f"f32 {report['weight_bytes_f32']}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except TernlmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
