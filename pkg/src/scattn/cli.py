"""Command-line surface: gen-data, train, caption, eval, memcost, inspect-attention.

Exit codes: 0 success, 2 usage or path problems, 3 numerical failure
(training diverged). Every run of `train` writes a manifest JSON next to
the checkpoint before the first epoch so the run can be reproduced from
flags alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import metrics as M
from .attention import AttentionOrder, attention_memory_cost
from .decoder import decode_caption
from .encoder import load_feature_map
from .errors import (
    ConfigError, DimensionError, DomainError, FormatError, TrainingDiverged,
    UsageError, VocabularyError,
)
from .model import CaptionModel, ModelConfig
from .serialize import read_checkpoint
from .training import TrainConfig, train

_USAGE_ERRORS = (
    UsageError, ConfigError, DomainError, DimensionError, FormatError,
    VocabularyError, FileNotFoundError, NotADirectoryError, IsADirectoryError,
)


def _env_threads():
    raw = os.environ.get("SCA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SCA_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"SCA_THREADS must be >= 1, got {n}")
    return n


def cmd_gen_data(args):
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to write into it")
    path = D.generate_dataset(args.n, args.seed, out)
    print(f"wrote {args.n} records to {path}")
    return 0


def _history_path(out):
    return Path(str(out) + ".history.csv")


def _manifest_path(out):
    return Path(str(out) + ".manifest.json")


def cmd_train(args):
    data_path = Path(args.data)
    if not data_path.exists():
        raise UsageError(f"no dataset at {data_path}")
    dataset = D.load_dataset(data_path)
    order = AttentionOrder.from_string(args.order)
    mcfg = ModelConfig(
        vocab_size=dataset.vocab.size,
        embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim,
        visual_dim=args.visual_dim,
        mapping_dim=args.mapping_dim,
        order=order,
        attn_layers=args.layers,
        rescale=not args.no_rescale,
    )
    tcfg = TrainConfig(
        batch_size=args.batch,
        dropout=args.dropout,
        patience=args.patience,
        max_epochs=args.epochs,
        seed=args.seed,
        threads=args.threads if args.threads else _env_threads(),
    )
    warm = read_checkpoint(args.warm_start) if args.warm_start else None

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": "train",
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "data": str(data_path),
        "out": str(out),
        "warm_start": args.warm_start,
        "train": {
            "batch_size": tcfg.batch_size, "dropout": tcfg.dropout,
            "patience": tcfg.patience, "max_epochs": tcfg.max_epochs,
            "seed": tcfg.seed, "threads": tcfg.threads,
        },
        "model": {
            "vocab_size": mcfg.vocab_size, "embed_dim": mcfg.embed_dim,
            "hidden_dim": mcfg.hidden_dim, "visual_dim": mcfg.visual_dim,
            "mapping_dim": mcfg.mapping_dim, "order": mcfg.order.value,
            "attn_layers": mcfg.attn_layers, "rescale": mcfg.rescale,
            "encoder_mode": mcfg.encoder_mode, "input_shape": list(mcfg.input_shape),
        },
    }
    _manifest_path(out).write_text(json.dumps(manifest, indent=2) + "\n")

    model = CaptionModel(mcfg, dataset.vocab, seed=args.seed)
    model, result = train(dataset, model, tcfg, warm_start=warm)
    if result.fresh_names:
        print(
            "warm start left these parameters freshly initialized: "
            + ", ".join(result.fresh_names),
            file=sys.stderr,
        )
    with open(_history_path(out), "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, tl, vl in result.history:
            fh.write(f"{epoch},{tl!r},{vl!r}\n")
    model.save(out)
    print(f"best val loss {result.best_val:.6f} at epoch {result.best_epoch}; "
          f"checkpoint {out}")
    return 0


def _iter_inputs(path):
    """Yield (id, image array, reference caption or None) for a SCAT file or dataset."""
    p = Path(path)
    if p.is_file() and p.suffix == ".scat":
        yield 0, load_feature_map(p).data, None
        return
    dataset = D.load_dataset(p)
    for ex in dataset.examples:
        yield ex.id, ex.image, ex.caption


def _dump_attention(dump_dir, input_id, infos, tokens, vocab):
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    for t, step_weights in enumerate(infos):
        word = vocab.token_for(tokens[t]) if t < len(tokens) else "<end>"
        lines = []
        for w in step_weights:
            alpha = w.alpha.data  # location order i = h*W + w
            beta = w.beta.data
            lines.append(f"t={t} layer={w.layer} word={word}")
            lines.append(f"alpha {w.width} {w.height}")
            lines.append(" ".join(repr(float(v)) for v in alpha))
            lines.append(f"beta {beta.size}")
            lines.append(" ".join(repr(float(v)) for v in beta))
        (dump_dir / f"{input_id}_t{t}.txt").write_text("\n".join(lines) + "\n")


def cmd_caption(args):
    if args.beam < 1:
        raise UsageError(f"--beam must be >= 1, got {args.beam}")
    if args.max_len < 1:
        raise UsageError(f"--max-len must be >= 1, got {args.max_len}")
    model = CaptionModel.load(args.ckpt)
    for input_id, image, _ in _iter_inputs(args.input):
        from .tensor import Tensor

        tokens, infos = decode_caption(
            model, Tensor(image), mode="beam", width=args.beam, max_len=args.max_len
        )
        words = model.vocab.decode(tokens)
        print(f"{input_id}\t{' '.join(words)}")
        if args.dump_attn:
            _dump_attention(args.dump_attn, input_id, infos, tokens, model.vocab)
    return 0


def cmd_eval(args):
    model = CaptionModel.load(args.ckpt)
    dataset = D.load_dataset(args.data)
    examples = {
        "train": dataset.train, "val": dataset.val,
        "test": dataset.test, "all": dataset.examples,
    }.get(args.split)
    if examples is None:
        raise UsageError(f"unknown split {args.split!r}")
    if not examples:
        raise UsageError(f"split {args.split!r} is empty")
    from .tensor import Tensor

    pairs = []
    for ex in examples:
        tokens, _ = decode_caption(model, Tensor(ex.image), mode="beam",
                                   width=args.beam, max_len=args.max_len)
        pairs.append(M.make_pair(model.vocab.decode(tokens), [ex.caption]))
    b = M.bleu(pairs)
    rg = M.corpus_rouge_l(pairs)
    for n, score in enumerate(b, start=1):
        print(f"B@{n} {score:.4f}")
    print(f"RG {rg:.4f}")
    return 0


def cmd_memcost(args):
    joint, spatial, channel = attention_memory_cost(args.w, args.h, args.c, args.k)
    factored = spatial + channel
    print(f"joint {joint}")
    print(f"spatial {spatial}")
    print(f"channel {channel}")
    print(f"factored {factored}")
    print(f"ratio {joint / factored:.2f}")
    return 0


def cmd_inspect_attention(args):
    path = Path(args.file)
    if not path.is_file():
        raise UsageError(f"no attention dump at {path}")
    lines = path.read_text().splitlines()
    i = 0
    while i < len(lines):
        header = lines[i]
        if not header.startswith("t="):
            raise FormatError(f"{path}: expected a header at line {i + 1}")
        try:
            alpha_dims = lines[i + 1].split()
            width, height = int(alpha_dims[1]), int(alpha_dims[2])
            alpha = np.array([float(v) for v in lines[i + 2].split()])
            c = int(lines[i + 3].split()[1])
            beta = np.array([float(v) for v in lines[i + 4].split()])
        except (IndexError, ValueError) as e:
            raise FormatError(f"{path}: malformed block at line {i + 1}: {e}")
        if alpha.size != width * height or beta.size != c:
            raise FormatError(f"{path}: block at line {i + 1} has wrong vector lengths")
        loc = int(np.argmax(alpha))
        w_at, h_at = loc % width, loc // width
        top_c = np.argsort(-beta)[:3]
        print(header)
        print(f"  alpha peak {alpha[loc]:.4f} at (w={w_at}, h={h_at}) of {width}x{height}")
        print("  beta top channels " + " ".join(
            f"{ch}:{beta[ch]:.4f}" for ch in top_c
        ))
        i += 5
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scattn",
        description="Spatial and channel-wise attention captioning on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a caption model")
    p.add_argument("--data", required=True)
    p.add_argument("--order", choices=["cs", "sc", "s", "c"], default="cs")
    p.add_argument("--layers", type=int, choices=[1, 2], default=1)
    p.add_argument("--warm-start", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--threads", type=int, default=0,
                   help="0 = take SCA_THREADS from the environment (default 1)")
    p.add_argument("--embed-dim", type=int, default=24)
    p.add_argument("--hidden-dim", type=int, default=48)
    p.add_argument("--visual-dim", type=int, default=32)
    p.add_argument("--mapping-dim", type=int, default=24)
    p.add_argument("--no-rescale", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("caption", help="caption a SCAT image or a whole dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--dump-attn", default=None)
    p.set_defaults(fn=cmd_caption)

    p = sub.add_parser("eval", help="decode a split and score BLEU/ROUGE-L")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=16)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("memcost", help="joint vs factored attention parameter counts")
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(fn=cmd_memcost)

    p = sub.add_parser("inspect-attention", help="summarize an attention dump file")
    p.add_argument("file")
    p.set_defaults(fn=cmd_inspect_attention)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
