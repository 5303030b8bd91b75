"""``xfq`` command line: quantize, merge, infer, train, cost, stats.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Machine-readable output is tab-separated with ``#``-prefixed headers.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from . import costmodel as cm
from .bitkernel import conv_quantized, xnor_reference
from .datasets import get_dataset
from .errors import FormatError, GeometryError, ShapeError, TrainingDivergedError, XfqError
from .fileio import MODEL_MAGIC, TENSOR_MAGIC, read_model, read_tensor, sniff, write_model, write_tensor
from .quantizer import Mode, merge_groups, quantize_layer, relative_error, scale_stats
from .tensor import AxisRole, ConvGeometry, Tensor4, conv2d_reference, max_rel_error

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
INFER_TOLERANCE = 1e-8
SWEEP_BETAS = (1, 2, 4, 8, 16)
SWEEP_NK = (16, 32, 64, 128, 256, 512, 1024, 2048, 2304, 4096)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _row(*values) -> str:
    return "\t".join(_fmt(v) for v in values)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


# ---------------------------------------------------------------------------
# quantize / merge / stats
# ---------------------------------------------------------------------------


def _print_layer_stats(layers, weights=None, out=sys.stdout):
    print("#layer\tmode\tbeta\tgroups\talpha_min\talpha_max\talpha_mean\talpha_var\trel_recon_error", file=out)
    for i, layer in enumerate(layers):
        st = scale_stats(layer)
        err = relative_error(weights[i], layer) if weights is not None else float("nan")
        print(
            _row(i, layer.mode.value, layer.beta, len(layer.groups), st.min, st.max, st.mean, st.variance, err),
            file=out,
        )


def cmd_quantize(args) -> int:
    weights = []
    for path in args.inputs:
        t = read_tensor(path)
        if t.role is not AxisRole.WEIGHT:
            raise DataError(f"{path}: expected a WEIGHT tensor (k_h, k_w, i_c, o_c)")
        weights.append(t)
    layers = [quantize_layer(w, args.beta, Mode(args.mode)) for w in weights]
    write_model(args.out, layers)
    _print_layer_stats(layers, weights)
    return EXIT_OK


def cmd_merge(args) -> int:
    layers = read_model(args.input)
    for i, layer in enumerate(layers):
        if layer.beta != 1:
            raise DataError(f"{args.input}: layer {i} has beta={layer.beta}; merge needs a filter-wise (beta=1) model")
    merged = [merge_groups(layer, args.beta) for layer in layers]
    write_model(args.out, merged)
    _print_layer_stats(merged)
    return EXIT_OK


def cmd_stats(args) -> int:
    layers = read_model(args.input)
    _print_layer_stats(layers)
    print("#layer\tbin_lo\tbin_hi\tcount")
    for i, layer in enumerate(layers):
        st = scale_stats(layer, bins=args.bins)
        for lo, hi, n in zip(st.bin_edges[:-1], st.bin_edges[1:], st.histogram):
            print(_row(i, float(lo), float(hi), int(n)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def cmd_infer(args) -> int:
    magic = sniff(args.model) if _exists(args.model) else b""
    if magic == MODEL_MAGIC:
        layers = read_model(args.model)
    elif magic == TENSOR_MAGIC:
        layers = [read_tensor(args.model)]
        if layers[0].role is not AxisRole.WEIGHT:
            raise DataError(f"{args.model}: expected a WEIGHT tensor or an XFQM model")
    else:
        read_model(args.model)  # raises a FormatError naming the file
        return EXIT_DATA
    x = read_tensor(args.input)
    if x.role is not AxisRole.ACTIVATION:
        raise DataError(f"{args.input}: expected an ACTIVATION tensor (h, w, c, batch)")
    oracle_weights = [read_tensor(p) for p in args.weights] if args.weights else None
    if oracle_weights is not None and len(oracle_weights) != len(layers):
        raise DataError(f"--weights: {len(oracle_weights)} files for {len(layers)} model layers")
    geom = ConvGeometry(args.stride, args.padding)
    worst = 0.0
    h = x
    for i, layer in enumerate(layers):
        if isinstance(layer, Tensor4):
            out = conv2d_reference(h, layer, geom)
            ref = out
        else:
            out = conv_quantized(h, layer, geom)
            if args.reference:
                oracle = layer
                if oracle_weights is not None:
                    oracle = quantize_layer(oracle_weights[i], layer.beta, layer.mode)
                if layer.mode is Mode.XNOR:
                    ref = xnor_reference(h, oracle, geom)
                else:
                    ref = conv2d_reference(h, oracle.dequantize(), geom)
        if args.reference:
            dev = max_rel_error(out, ref)
            worst = max(worst, dev) if math.isfinite(dev) else math.inf
            print(_row(f"layer{i}_max_rel_deviation", dev))
        h = out
    write_tensor(args.out, h)
    if args.reference:
        print(_row("max_rel_deviation", worst))
        if not worst <= INFER_TOLERANCE:
            raise NumericalError(f"deviation {worst:g} exceeds tolerance {INFER_TOLERANCE:g}")
    return EXIT_OK


def _exists(path) -> bool:
    try:
        with open(path, "rb"):
            return True
    except OSError:
        return False


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import TrainConfig, make_toy_net, train

    try:
        data = get_dataset(args.data, seed=args.seed)
    except (OSError, ValueError) as e:
        raise DataError(f"--data {args.data}: {e}") from None
    net = make_toy_net(
        input_shape=data.input_shape,
        n_classes=data.n_classes,
        channels=tuple(args.channels),
        mode=Mode(args.mode),
        beta=args.beta,
        seed=args.seed,
        quantize_first=args.quantize_first,
        quantize_last=args.quantize_last,
    )
    try:
        cfg = TrainConfig(
            batch_size=args.batch_size,
            epochs=args.epochs,
            lr=args.lr,
            decay_factor=args.decay_factor,
            decay_epochs=tuple(args.decay_epochs),
            seed=args.seed,
            optimizer=args.optimizer,
        )
    except ValueError as e:
        raise UsageError(f"train: {e}") from None

    def report(m):
        print(json.dumps({"epoch": m.epoch, "lr": m.lr, "train_loss": m.train_loss, "eval_accuracy": m.eval_accuracy}))

    net, history = train(net, data, cfg, callback=report)
    if args.out:
        write_model(args.out + ".xfqm", net.quantized_layers())
        for idx, layer in net.weight_layers():
            w = layer.weight if layer.weight.ndim == 4 else layer.weight.reshape(1, 1, *layer.weight.shape)
            write_tensor(f"{args.out}.layer{idx}.xfqt", Tensor4.weight(w))
    return EXIT_OK


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------


def parse_layer_specs(text: str, source: str = "<spec>") -> list[cm.LayerSpec]:
    """One record per line: ``k_h k_w i_c o_c N_o beta mode``; ``#`` starts a comment."""
    specs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise DataError(f"{source}:{lineno}: expected 7 fields 'k_h k_w i_c o_c N_o beta mode', got {len(parts)}")
        try:
            nums = [int(p) for p in parts[:6]]
            mode = Mode(parts[6].lower())
            specs.append(cm.LayerSpec(*nums, mode=mode))
        except ValueError as e:
            raise DataError(f"{source}:{lineno}: {e}") from None
    if not specs:
        raise DataError(f"{source}: no layer records")
    return specs


def cmd_cost(args) -> int:
    try:
        with open(args.spec, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DataError(f"{args.spec}: {e.strerror}") from None
    specs = parse_layer_specs(text, args.spec)
    try:
        hw = cm.HardwareModel(args.L, args.gamma)
    except ValueError as e:
        raise UsageError(f"--L/--gamma: {e}") from None
    print(f"# cost model L={args.L} gamma={_fmt(args.gamma)} double_xnor={int(args.double_xnor)}")
    print("# units: ops are per image; bytes are bytes; speedup and memory_ratio are dimensionless")
    print(
        "#layer\tk_h\tk_w\ti_c\to_c\tN_o\tbeta\tmode\tN_k\tflops\tbinary_ops\treal_macs\tscale_muls"
        "\tparam_bytes_fp\tparam_bytes_quant\tmemory_ratio\tspeedup"
    )
    for i, s in enumerate(specs):
        c = cm.layer_cost(s, hw, double_xnor=args.double_xnor)
        print(
            _row(
                i, s.k_h, s.k_w, s.i_c, s.o_c, s.n_o, s.beta, s.mode.value, s.n_k, c.flops, c.binary_ops,
                c.real_macs, c.scale_muls, c.param_bytes_fp, c.param_bytes_quant, c.memory_ratio, c.speedup,
            )
        )
    if args.sweep:
        n_ks = sorted(set(SWEEP_NK) | {s.n_k for s in specs})
        grid = cm.speedup_sweep(n_ks, SWEEP_BETAS, hw)
        print("# speedup sweep: 1/(1/(beta*N_k) + 1/(gamma*L)); rows beta, columns N_k")
        print("#beta\t" + "\t".join(f"N_k={nk}" for nk in n_ks))
        for beta, row in zip(SWEEP_BETAS, grid):
            print(str(beta) + "\t" + "\t".join(f"{v:.4f}" for v in row))
    for beta in (1, 16):
        b = cm.dilemma_boundary(hw, beta)
        print(f"# dilemma_boundary beta={beta}: raw={b:.4f} rounded_up={math.ceil(b)} rounded={round(b, 1)}")
    print("# speedups of other binary schemes use different counting conventions and are not reproduced")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xfq", description="Cross-filter binary quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", help="quantize XFQT weight tensors into an XFQM model")
    q.add_argument("inputs", nargs="+", help="XFQT weight files, one per layer")
    q.add_argument("--beta", type=_positive_int, default=1)
    q.add_argument("--mode", choices=("bw", "xnor"), default="bw")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    m = sub.add_parser("merge", help="merge a filter-wise XFQM model into beta-sized groups")
    m.add_argument("input")
    m.add_argument("--beta", type=_positive_int, required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    i = sub.add_parser("infer", help="run a model on an activation tensor")
    i.add_argument("model", help="XFQM model or XFQT full-precision weight")
    i.add_argument("input", help="XFQT activation (h, w, c, batch)")
    i.add_argument("--out", required=True)
    i.add_argument("--stride", type=_positive_int, default=1)
    i.add_argument("--padding", type=int, default=0)
    i.add_argument("--reference", action="store_true", help="compare against the dense oracle")
    i.add_argument("--weights", nargs="+", help="full-precision weights for the oracle, one XFQT per layer")
    i.set_defaults(func=cmd_infer)

    t = sub.add_parser("train", help="train the toy CNN")
    t.add_argument("--beta", type=_positive_int, default=1)
    t.add_argument("--mode", choices=("bw", "xnor", "fp"), default="bw")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", default="blobs", help="blobs | stripes | idx:IMAGES[,LABELS]")
    t.add_argument("--quantize-first", action="store_true")
    t.add_argument("--quantize-last", action="store_true")
    t.add_argument("--batch-size", type=_positive_int, default=32)
    t.add_argument("--channels", type=_positive_int, nargs="+", default=[8])
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--decay-factor", type=float, default=1.0)
    t.add_argument("--decay-epochs", type=int, nargs="*", default=[])
    t.add_argument("--out", help="output prefix for PREFIX.xfqm and PREFIX.layerN.xfqt")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cost", help="analytic cost report for a layer-spec file")
    c.add_argument("spec", help="text file, one 'k_h k_w i_c o_c N_o beta mode' record per line")
    c.add_argument("--L", type=_positive_int, default=64)
    c.add_argument("--gamma", type=float, default=1.91)
    c.add_argument("--sweep", action="store_true")
    c.add_argument("--double-xnor", action=argparse.BooleanOptionalAction, default=True,
                   help="count XNOR binary ops as XOR + bitcount (default on)")
    c.set_defaults(func=cmd_cost)

    s = sub.add_parser("stats", help="scaling-factor statistics of an XFQM model")
    s.add_argument("input")
    s.add_argument("--bins", type=_positive_int, default=10)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "padding", 0) < 0:
            raise UsageError("--padding must be non-negative")
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DataError, ShapeError, GeometryError) as e:
        print(f"xfq: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingDivergedError) as e:
        print(f"xfq: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except XfqError as e:
        print(f"xfq: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
