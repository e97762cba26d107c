"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, frontend, mixer, plotting, speaker, synth
from .errors import NumericError
from .frontend import FeatureConfig, FeatureWriter, Variant
from .masknet import MaskNetConfig, init_params
from .quantizer import quantize_model
from .suppression import SuppressionConfig
from .training import LossConfig, TrainConfig, TrainState, train_step
from .vfm import load_model, predicted_size, save_model

log = logging.getLogger("vflite")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_SECTIONS = {"features", "model", "loss", "train", "mix", "eval", "enhance"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def threads() -> int:
    try:
        return max(1, int(os.environ.get("VFLITE_THREADS", "1")))
    except ValueError:
        raise UsageError("VFLITE_THREADS must be an integer") from None


# ---------------------------------------------------------------------------
# config files


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = v
    return out


def config_defaults(path, parser: argparse.ArgumentParser) -> dict:
    """Map a JSON config onto argparse destinations.

    Keys may be nested or dotted. ``features.n_mels`` sets ``--n-mels``;
    ``suppression.beta`` sets ``--suppression-beta`` and ``suppression.mode``
    sets ``--suppression``.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    known = {a.dest for a in parser._actions}
    out = {}
    for key, value in _flatten(raw).items():
        parts = key.replace("-", "_").split(".")
        if parts[0] in _SECTIONS and len(parts) > 1:
            parts = parts[1:]
        dest = "_".join(parts)
        if dest == "suppression_mode":
            dest = "suppression"
        if dest not in known:
            raise UsageError(f"{path}: unknown config key {key!r}")
        out[dest] = value
    return out


# ---------------------------------------------------------------------------
# shared argument groups


def _feature_args(p):
    g = p.add_argument_group("features")
    g.add_argument("--variant", default="stacked", help="fft | filterbank | stacked (default %(default)s)")
    g.add_argument("--n-fft", type=int, default=1024)
    g.add_argument("--window-ms", type=float, default=25.0)
    g.add_argument("--hop-ms", type=float, default=10.0)
    g.add_argument("--n-mels", type=int, default=128)
    g.add_argument("--stack", type=int, default=4)
    g.add_argument("--stride", type=int, default=4)
    g.add_argument("--mel-fmin-hz", type=float, default=125.0)
    g.add_argument("--mel-fmax-hz", type=float, default=7500.0)


def _fcfg(args) -> FeatureConfig:
    return FeatureConfig(
        variant=Variant.parse(args.variant),
        n_fft=args.n_fft,
        window_ms=args.window_ms,
        hop_ms=args.hop_ms,
        n_mels=args.n_mels,
        stack=args.stack,
        stride=args.stride,
        mel_fmin_hz=args.mel_fmin_hz,
        mel_fmax_hz=args.mel_fmax_hz,
    )


def _suppression_args(p):
    g = p.add_argument_group("suppression")
    g.add_argument("--suppression", default="fixed:1.0", help="off | fixed:<w> | adaptive[:<beta>] (default %(default)s)")
    g.add_argument("--suppression-w", type=float, default=None)
    g.add_argument("--suppression-a", type=float, default=1.0)
    g.add_argument("--suppression-b", type=float, default=0.0)
    g.add_argument("--suppression-beta", type=float, default=0.8)


def _supp(args) -> SuppressionConfig:
    kw = {"a": args.suppression_a, "b": args.suppression_b, "beta": args.suppression_beta}
    if args.suppression_w is not None:
        kw["w"] = args.suppression_w
    return SuppressionConfig.parse(args.suppression, **kw)


def _model_fcfg(model) -> FeatureConfig:
    d = model.meta.get("feature_config")
    if d is None:
        raise ValueError("model file carries no feature_config; retrain or pass a model written by `vflite train`")
    return FeatureConfig.from_dict(d)


# ---------------------------------------------------------------------------
# commands


def cmd_features(args) -> int:
    fcfg = _fcfg(args)
    seq = frontend.extract(frontend.read_wav(args.input), fcfg)
    frontend.write_features(args.output, seq)
    print(f"{args.output}\t{seq.variant.name.lower()}\t{seq.shape[0]}x{seq.shape[1]}")
    return EXIT_OK


def cmd_embed(args) -> int:
    fcfg = _fcfg(args)
    v = speaker.embed_reference(frontend.read_wav(args.reference), fcfg, args.dim)
    speaker.save_dvector(v, args.output)
    print(f"{args.output}\tD={v.dim}")
    return EXIT_OK


def cmd_mix(args) -> int:
    fcfg = _fcfg(args)
    reverb_prob = 1.0 if args.reverb else args.reverb_prob
    paths = mixer.mix_corpus(
        args.manifest,
        args.outdir,
        fcfg,
        snr_lo=args.snr_lo,
        snr_hi=args.snr_hi,
        reverb_prob=reverb_prob,
        reverb_target=args.reverb_target,
        seed=args.seed,
        dvec_dim=args.dvec_dim,
        workers=threads(),
    )
    for p in paths:
        meta = json.loads(p.read_text())
        print(f"{p.name}\t{meta['spec']['noise_kind']}\t{meta['spec']['room']}\t{meta['spec']['snr_db']:.4f}\t{meta['measured_snr_db']:.4f}")
    return EXIT_OK


def _load_metrics(path) -> list:
    p = Path(path)
    return json.loads(p.read_text())["history"] if p.exists() else []


def cmd_train(args) -> int:
    examples = mixer.load_archive(args.data)
    if not examples:
        raise ValueError(f"{args.data}: no examples found")
    fcfg_d = examples[0].meta.get("feature_config")
    lcfg = LossConfig(alpha=args.alpha, noise_head_weight=args.noise_head_weight, kind=args.loss)
    tcfg = TrainConfig(
        learning_rate=args.lr,
        optimizer=args.optimizer,
        batch_size=args.batch_size,
        steps=args.steps,
        clip_norm=args.clip_norm,
        seed=args.seed,
    )
    metrics_path = args.metrics or str(args.output) + ".metrics.json"
    history: list = []
    if args.resume:
        ckpt = load_model(args.resume)
        cfg = ckpt.config
        m = {k[len("adam.m."):]: v for k, v in ckpt.extra.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: v for k, v in ckpt.extra.items() if k.startswith("adam.v.")}
        state = TrainState(ckpt.params, step=int(ckpt.meta.get("step", 0)), m=m, v=v)
        fcfg_d = ckpt.meta.get("feature_config", fcfg_d)
        previous = args.metrics or str(args.resume) + ".metrics.json"
        history = [h for h in _load_metrics(previous) if h["step"] <= state.step]
    else:
        if args.model_config:
            cfg = MaskNetConfig.from_dict(json.loads(Path(args.model_config).read_text()))
        else:
            ex = examples[0]
            cfg = MaskNetConfig(
                input_dim=ex.noisy.shape[1],
                dvec_dim=ex.dvec.dim,
                lstm_layers=args.layers,
                lstm_units=args.units,
                head_hidden=tuple(args.head_hidden),
                conv_kernel=args.conv_kernel,
                conv_channels=args.conv_channels if args.conv_kernel else 0,
                variant=ex.noisy.variant,
                log_domain_mask=args.log_domain_mask,
            )
        state = TrainState(init_params(cfg, np.random.default_rng(args.seed)))
    state.params.check(cfg)
    target = state.step + tcfg.steps
    t0 = time.perf_counter()
    while state.step < target:
        rec = train_step(state, examples, cfg, lcfg, tcfg)
        history.append(rec)
        if args.log_every and rec["step"] % args.log_every == 0:
            log.info("step %d loss %.6g", rec["step"], rec["loss"])
    for k, arr in state.params.f64().items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter {k} became non-finite")
    meta = {
        "step": state.step,
        "feature_config": fcfg_d,
        "loss": {"alpha": lcfg.alpha, "noise_head_weight": lcfg.noise_head_weight, "kind": lcfg.kind},
        "train": tcfg.to_dict(),
    }
    extra = {f"adam.m.{k}": v for k, v in state.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in state.v.items()})
    size = save_model(args.output, state.params, cfg, meta, extra)
    Path(metrics_path).write_text(json.dumps({"history": history, "meta": meta}, indent=1))
    if args.plot and history:
        plotting.plot_loss(history, args.plot)
    last = history[-1]["loss"] if history else float("nan")
    print(f"{args.output}\tsteps={state.step}\tbytes={size}\tloss={last:.6g}\tseconds={time.perf_counter() - t0:.1f}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    model = load_model(args.model)
    fcfg = _model_fcfg(model)
    dvec = speaker.load_dvector(args.dvector, expected_dim=model.config.dvec_dim)
    enh = evaluation.Enhancer(model.params, model.config, dvec, _supp(args))
    trace = open(args.w_trace, "w") if args.w_trace else None
    keep = [] if args.plot else None
    try:
        if trace:
            trace.write("frame\tw\n")
        with FeatureWriter(args.output, fcfg.variant, fcfg.width, fcfg.frame_hop_s) as out:

            def sink(block_in, block_out, ws):
                if not np.all(np.isfinite(block_out)):
                    raise NumericError("non-finite enhanced features")
                if trace:
                    for i, w in enumerate(ws):
                        trace.write(f"{out.count + i}\t{w:.9g}\n")
                out.write(block_out)
                if keep is not None:
                    keep.append((block_in, block_out, ws))

            n = evaluation.stream_enhance(frontend.iter_wav(args.input, args.chunk), fcfg, enh, sink)
    finally:
        if trace:
            trace.close()
    if keep:
        plotting.plot_features(
            np.concatenate([k[0] for k in keep]),
            np.concatenate([k[1] for k in keep]),
            args.plot,
            np.concatenate([k[2] for k in keep]),
            fcfg.frame_hop_s,
        )
    print(f"{args.output}\tframes={n}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = load_model(args.model)
    if model.params.quantized:
        raise ValueError(f"{args.model}: model is already quantized")
    q = quantize_model(model.params)
    meta = dict(model.meta, quantized=True)
    before = Path(args.model).stat().st_size
    size = save_model(args.output, q, model.config, meta)
    print(
        f"{args.output}\tbytes={size}\tfloat_bytes={before}\tratio={before / size:.2f}"
        f"\tpayload={predicted_size(model.config, True)}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    supp = _supp(args)
    source = Path(args.data)
    if source.is_dir():
        groups: dict[str, list] = {}
        for ex in mixer.load_archive(source):
            groups.setdefault(evaluation.condition_of(ex.meta), []).append(ex)
        wanted = evaluation.parse_conditions(args.conditions)
        groups = {k: groups[k] for k in wanted if k in groups}
        report = evaluation.evaluate_examples(groups, model.params, model.config, supp, args.epsilon)
    else:
        report = evaluation.evaluate_manifest(
            source,
            model.params,
            model.config,
            _model_fcfg(model),
            evaluation.parse_conditions(args.conditions),
            supp,
            args.epsilon,
            seed=args.seed,
            snr_lo=args.snr_lo,
            snr_hi=args.snr_hi,
        )
    report.meta.update(model=str(args.model), quantized=model.params.quantized, suppression=supp.to_dict())
    for r in report.rows:
        if not all(np.isfinite([r.mse_enhanced, r.mse_unenhanced])):
            raise NumericError(f"non-finite metric in condition {r.condition}")
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    report.write_tsv(out.with_suffix(".tsv"))
    if not args.no_plots and report.rows:
        plotting.plot_report(report, out.parent, out.stem)
    print(out.with_suffix(".tsv").read_text(), end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    manifest = synth.write_corpus(
        args.outdir, args.rows, seed=args.seed, n_speakers=args.speakers,
        duration_s=args.duration, speech_fraction=args.speech_fraction,
    )
    print(manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="vflite", description="Streaming speaker-conditioned feature enhancement.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file; keys mirror the flags")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("features", cmd_features, "extract features from a WAV file into VFF1")
    p.add_argument("input")
    p.add_argument("output")
    _feature_args(p)

    p = add("embed", cmd_embed, "compute a d-vector (VFD1) from reference audio")
    p.add_argument("reference")
    p.add_argument("output")
    p.add_argument("--dim", type=int, default=speaker.DEFAULT_DIM)
    _feature_args(p)

    p = add("mix", cmd_mix, "synthesise a mixture archive from a corpus manifest")
    p.add_argument("manifest")
    p.add_argument("outdir")
    p.add_argument("--snr-lo", type=float, default=1.0)
    p.add_argument("--snr-hi", type=float, default=10.0)
    p.add_argument("--reverb", action="store_true", help="reverberate every interferer")
    p.add_argument("--reverb-prob", type=float, default=0.0)
    p.add_argument("--reverb-target", action="store_true", help="also reverberate the target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dvec-dim", type=int, default=speaker.DEFAULT_DIM)
    _feature_args(p)

    p = add("train", cmd_train, "train a mask network on a mixture archive")
    p.add_argument("data")
    p.add_argument("output")
    p.add_argument("--model-config", help="JSON MaskNetConfig")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--units", type=int, default=512)
    p.add_argument("--head-hidden", type=int, nargs="*", default=[64, 64])
    p.add_argument("--conv-kernel", type=int, default=None)
    p.add_argument("--conv-channels", type=int, default=4)
    p.add_argument("--log-domain-mask", action="store_true")
    p.add_argument("--loss", choices=["asym", "l2"], default="asym")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--noise-head-weight", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="continue from a checkpoint written by this command")
    p.add_argument("--metrics", help="metrics log path (default <output>.metrics.json)")
    p.add_argument("--plot", help="write a loss-curve PNG here")
    p.add_argument("--log-every", type=int, default=0)

    p = add("enhance", cmd_enhance, "stream a WAV file through a model into enhanced VFF1 features")
    p.add_argument("input")
    p.add_argument("dvector")
    p.add_argument("model")
    p.add_argument("output")
    p.add_argument("--w-trace", help="write the per-frame suppression strength as TSV")
    p.add_argument("--plot", help="write an input/enhanced feature figure here")
    p.add_argument("--chunk", type=int, default=1600, help="samples read per block")
    _suppression_args(p)

    p = add("quantize", cmd_quantize, "int8 dynamic-range quantize a float model")
    p.add_argument("model")
    p.add_argument("output")

    p = add("eval", cmd_eval, "proxy metrics per noise condition; writes JSON, TSV and figures")
    p.add_argument("data", help="corpus manifest (mixed on the fly) or mixture archive directory")
    p.add_argument("model")
    p.add_argument("report")
    p.add_argument("--conditions", default="clean,additive,reverb")
    p.add_argument("--epsilon", type=float, default=evaluation.DEFAULT_EPSILON)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-lo", type=float, default=1.0)
    p.add_argument("--snr-hi", type=float, default=10.0)
    p.add_argument("--no-plots", action="store_true")
    _suppression_args(p)

    p = add("synth", cmd_synth, "write a synthetic band-limited speaker corpus and manifest")
    p.add_argument("outdir")
    p.add_argument("--rows", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers", type=int, default=6)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--speech-fraction", type=float, default=0.5)
    return parser, subs


def main(argv=None) -> int:
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        if args.config:
            subs[args.command].set_defaults(**config_defaults(args.config, subs[args.command]))
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
