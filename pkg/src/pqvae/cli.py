"""
Command line: ``pqvae {gen,train,eval,sweep,compose,dump-config}``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, parse_config
from .data import FormatError, Manifest, gen_synthetic_corpus, write_features
from .model import pad_frames
from .quantize import ProductQuantizer, compose_codebook
from .tensorcore import no_grad
from .train import Trainer, evaluate, run_training

log = logging.getLogger("pqvae")

EVAL_COLUMNS = ["usage", "perplexity", "rmse", "n_tokens", "sub_usage", "sub_perplexity"]
SWEEP_COLUMNS = ["spec"] + EVAL_COLUMNS + ["error"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def eval_row(report) -> list[str]:
    join = lambda xs: ";".join(_fmt(x) for x in xs) if xs is not None else ""
    return [_fmt(report.usage), _fmt(report.perplexity), _fmt(report.rmse), _fmt(report.n_tokens),
            join(report.per_subbook_usage), join(report.per_subbook_perplexity)]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _load_config(path, seed=None, seed_target="train"):
    if path is None:
        synth, train = parse_config("")
    else:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {p}: {exc.strerror}") from None
        synth, train = parse_config(text, source=str(p))
        if train.manifest and not Path(train.manifest).is_absolute():
            train.manifest = str((p.parent / train.manifest))
    if seed is not None:
        if seed_target == "synth":
            synth.seed = seed
        else:
            train.seed = seed
    return synth, train


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_gen(args) -> int:
    synth, _ = _load_config(args.config, args.seed, seed_target="synth")
    if args.out is None:
        raise UsageError("gen needs --out DIR")
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory of output does not exist: {out.parent}")
    manifest = gen_synthetic_corpus(synth, out)
    log.info("wrote %d sequences to %s", len(manifest), out / "manifest.tsv")
    return 0


def cmd_train(args) -> int:
    _, train = _load_config(args.config, args.seed)
    if args.out is None:
        raise UsageError("train needs --out DIR")
    progress = None
    if not args.quiet:
        def progress(terms, report):
            if report is not None:
                log.info("step %d loss %.5f usage %s ppl %s rmse %.5f", terms["step"], terms["loss_total"],
                         report.usage, None if report.perplexity is None else round(report.perplexity, 2),
                         report.rmse)
    ckpt = run_training(train, args.out, resume=args.resume, progress=progress)
    log.info("checkpoint: %s", ckpt)
    return 0


def run_eval(checkpoint, manifest_path) -> list[str]:
    trainer = Trainer.from_checkpoint(checkpoint)
    seqs = Manifest.read(manifest_path).load("eval")
    return eval_row(trainer.evaluate(seqs))


def cmd_eval(args) -> int:
    row = run_eval(args.checkpoint, args.manifest)
    text = _csv_text(EVAL_COLUMNS, [row])
    if args.out_csv:
        Path(args.out_csv).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _sweep_one(spec_path: str, out_dir: str, seed):
    name = Path(spec_path).stem
    try:
        _, train = _load_config(spec_path, seed)
        run_dir = Path(out_dir) / name
        ckpt = run_training(train, run_dir)
        row = run_eval(ckpt, train.manifest)
        (run_dir / "eval.csv").write_text(_csv_text(EVAL_COLUMNS, [row]))
        return [name] + row + [""]
    except Exception as exc:  # failure goes in the sweep table; keep going
        log.debug("spec %s failed:\n%s", name, traceback.format_exc())
        return [name] + [""] * len(EVAL_COLUMNS) + [f"{type(exc).__name__}: {exc}"]


def cmd_sweep(args) -> int:
    spec_dir = Path(args.spec_dir)
    if not spec_dir.is_dir():
        raise UsageError(f"spec directory not found: {spec_dir}")
    if args.out is None:
        raise UsageError("sweep needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = sorted(str(p) for p in spec_dir.glob("*.cfg"))
    if args.jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, specs, [str(out)] * len(specs), [args.seed] * len(specs)))
    else:
        rows = []
        for spec in specs:
            log.info("sweep: running %s", Path(spec).stem)
            rows.append(_sweep_one(spec, str(out), args.seed))
    (out / "sweep.csv").write_text(_csv_text(SWEEP_COLUMNS, rows))
    failed = [r[0] for r in rows if r[-1]]
    for name in failed:
        log.error("spec %s failed: %s", name, next(r[-1] for r in rows if r[0] == name))
    return 2 if failed else 0


def cmd_compose(args) -> int:
    trainer = Trainer.from_checkpoint(args.checkpoint)
    q = trainer.quantizer
    if not isinstance(q, ProductQuantizer):
        raise UsageError(f"compose needs a PQ/VQ checkpoint, got quantizer kind {q.kind!r}")
    if args.out is None:
        raise UsageError("compose needs --out PATH")
    write_features(args.out, compose_codebook(q.books))
    if args.tokens:
        manifest = Manifest.read(args.tokens)
        ds = trainer.mcfg.downsample
        lines = []
        with no_grad():
            for seq in manifest.load():
                X, mask = pad_frames(seq, ds)
                if X.shape[0] == 0:
                    lines.append("")
                    continue
                res = q(trainer.model.encode(X))
                lines.append(" ".join(str(int(i)) for i in res.composed_index))
        tokens_out = args.tokens_out or f"{args.out}.tokens.txt"
        Path(tokens_out).write_text("\n".join(lines) + "\n")
    return 0


def cmd_dump_config(args) -> int:
    synth, train = _load_config(args.config, None)
    if args.seed is not None:
        synth.seed = train.seed = args.seed
    text = dump_config(synth, train)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--out", metavar="PATH")
    common.add_argument("--quiet", action="store_true")

    parser = _Parser(prog="pqvae", description="Product-quantized autoencoder experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", parents=[common], help="generate the synthetic corpus")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train one configuration")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="run every *.cfg in a directory")
    p.add_argument("--spec-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compose", parents=[common], help="export the composed codebook / token streams")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", metavar="MANIFEST")
    p.add_argument("--tokens-out")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("dump-config", parents=[common], help="print the fully defaulted config")
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"pqvae {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, FormatError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"pqvae {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
