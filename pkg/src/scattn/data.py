"""Synthetic captioning corpus with known spatial and channel ground truth.

Scenes are 16x16 RGB images on a 4x4 grid of 4x4-pixel cells. Each scene
holds one or two objects, an object being a shape drawn into one color
channel of one cell. Captions follow a closed grammar ("a red square",
"a blue disk and a green cross"), objects ordered by cell index, so every
caption is decided exactly by the image. That gives attention something
checkable: the shape identity is carried by channel statistics and the
object position by spatial location.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialize as S
from . import tensor as T
from .attention import AttentionOrder
from .errors import ConfigError, DomainError
from .tensor import Tensor
from .vocab import START, Vocabulary

SHAPES = ("square", "cross", "disk")
COLORS = ("red", "green", "blue")
WORDS = ("a", "and") + COLORS + SHAPES

CELL = 4  # pixels per cell side

# 4x4 pixel masks; all three differ as sets so channels can tell them apart
_SQUARE = np.ones((CELL, CELL))
_CROSS = np.zeros((CELL, CELL))
_CROSS[1:3, :] = 1.0
_CROSS[:, 1:3] = 1.0
_DISK = np.zeros((CELL, CELL))
_DISK[1:3, 1:3] = 1.0
MASKS = {"square": _SQUARE, "cross": _CROSS, "disk": _DISK}


def build_vocab():
    return Vocabulary(list(WORDS))


@dataclass(frozen=True)
class SceneSpec:
    """1-2 objects of (shape, color, cell); cell = row-major index on the grid."""

    objects: tuple
    grid: int = 4

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 2:
            raise ConfigError(f"a scene holds 1 or 2 objects, got {len(self.objects)}")
        cells = [cell for _, _, cell in self.objects]
        if len(set(cells)) != len(cells):
            raise ConfigError(f"objects overlap in cell {cells[0]}")
        for shape, color, cell in self.objects:
            if shape not in SHAPES:
                raise ConfigError(f"unknown shape {shape!r}")
            if color not in COLORS:
                raise ConfigError(f"unknown color {color!r}")
            if not 0 <= cell < self.grid * self.grid:
                raise ConfigError(f"cell {cell} outside the {self.grid}x{self.grid} grid")

    def ordered(self):
        return sorted(self.objects, key=lambda o: o[2])


def caption_for(spec):
    parts = []
    for shape, color, _ in spec.ordered():
        parts.extend(["a", color, shape])
        parts.append("and")
    return parts[:-1]


def parse_caption(tokens):
    """Inverse of caption_for up to cell positions: [(shape, color), ...]."""
    objs = []
    i = 0
    while i < len(tokens):
        if (tokens[i] != "a" or i + 2 >= len(tokens)
                or tokens[i + 1] not in COLORS or tokens[i + 2] not in SHAPES):
            raise ConfigError(f"malformed caption {tokens!r}")
        objs.append((tokens[i + 2], tokens[i + 1]))
        i += 3
        if i < len(tokens):
            if tokens[i] != "and" or i + 1 >= len(tokens):
                raise ConfigError(f"malformed caption {tokens!r}")
            i += 1
    if not objs:
        raise ConfigError("empty caption")
    return objs


def render_scene(spec):
    """Draw the scene; returns (image array (16,16,3), caption token list)."""
    side = spec.grid * CELL
    img = np.zeros((side, side, 3))
    for shape, color, cell in spec.objects:
        cx, cy = cell % spec.grid, cell // spec.grid
        ch = COLORS.index(color)
        img[cx * CELL:(cx + 1) * CELL, cy * CELL:(cy + 1) * CELL, ch] = MASKS[shape]
    return img, caption_for(spec)


def random_scene(rng, grid=4):
    n = int(rng.integers(1, 3))
    cells = rng.choice(grid * grid, size=n, replace=False)
    objects = tuple(
        (SHAPES[rng.integers(0, len(SHAPES))], COLORS[rng.integers(0, len(COLORS))], int(c))
        for c in cells
    )
    return SceneSpec(objects=objects, grid=grid)


def _split_for(i, n):
    train_end = math.ceil(0.8 * n)
    val_end = math.ceil(0.9 * n)
    if i < train_end:
        return "train"
    return "val" if i < val_end else "test"


def generate_dataset(n, seed, out_dir):
    """Write n scenes as SCAT images plus a dataset.jsonl index; deterministic."""
    if n < 1:
        raise DomainError(f"need n >= 1, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        spec = random_scene(rng)
        img, caption = render_scene(spec)
        rel = f"images/{i:05d}.scat"
        S.write_tensor(out / rel, img)
        records.append({
            "id": i,
            "split": _split_for(i, n),
            "image": rel,
            "caption": caption,
        })
    with open(out / "dataset.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return out / "dataset.jsonl"


@dataclass
class Example:
    id: int
    split: str
    image: np.ndarray
    caption: list
    token_ids: list

    def image_tensor(self):
        return Tensor(self.image)


class Dataset:
    def __init__(self, examples, vocab):
        self.examples = examples
        self.vocab = vocab

    def _split(self, name):
        return [e for e in self.examples if e.split == name]

    @property
    def train(self):
        return self._split("train")

    @property
    def val(self):
        return self._split("val")

    @property
    def test(self):
        return self._split("test")


def load_dataset(path):
    """Read a dataset.jsonl (or its directory); images load eagerly."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.jsonl"
    if not path.is_file():
        raise ConfigError(f"no dataset at {path}")
    vocab = build_vocab()
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            img = S.read_tensor(path.parent / rec["image"])
            examples.append(Example(
                id=rec["id"],
                split=rec["split"],
                image=img,
                caption=list(rec["caption"]),
                token_ids=vocab.encode(rec["caption"]),
            ))
    return Dataset(examples, vocab)


# ---------------------------------------------------------------------------
# channel alignment


def _pearson(x, y):
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def channel_alignment_score(model, examples, beta_mode="model"):
    """Do the channels the model attends to track the shape it is naming?

    For every teacher-forced step whose target is a shape word, take the
    channel weights the model produced at its last attentive layer, keep
    the (up to) five largest strictly positive entries, and ask whether
    those channels' mean corpus correlation with the target shape's
    presence beats the mean correlation over all channels. The returned
    score is the fraction of such steps that pass.

    beta_mode swaps the model's weights for controls: "uniform" (all
    channels equal, making the top-5 ill-defined, so each step counts the
    exact fraction of five-channel subsets that would pass: the chance
    baseline) or "oracle" (one-hot on the single best-correlated channel;
    scores 1.0 whenever correlations are not all equal).
    """
    if beta_mode not in ("model", "uniform", "oracle"):
        raise ConfigError(f"unknown beta_mode {beta_mode!r}")
    if not model.attentive:
        raise ConfigError("channel alignment needs an attentive model")
    if model.config.order is AttentionOrder.SPATIAL_ONLY:
        raise ConfigError("channel alignment needs a model with channel attention")
    if not examples:
        raise ConfigError("channel alignment needs a nonempty example set")

    from . import encoder as E  # local import to avoid cycles at module load

    # per-example channel profile of the (unattended) final encoder map
    profiles = []
    presence = []
    with T.no_grad():
        for ex in examples:
            maps = E.encode(ex.image_tensor(), model.enc_config, model.enc_weights)
            profiles.append(T.mean_pool_spatial(maps[-1]).data)
            shapes_here = {shape for shape, _ in parse_caption(ex.caption)}
            presence.append([1.0 if s in shapes_here else 0.0 for s in SHAPES])
    profiles = np.array(profiles)   # (N, C)
    presence = np.array(presence)   # (N, 3)
    n_channels = profiles.shape[1]
    corr = np.array([
        [_pearson(profiles[:, c], presence[:, s]) for s in range(len(SHAPES))]
        for c in range(n_channels)
    ])  # (C, 3)

    from .decoder import DecoderState
    from .vocab import END

    if beta_mode == "uniform":
        # all-equal weights leave the top five ill-defined, so score each
        # shape by the exact fraction of five-channel subsets that pass
        chance = [
            _subset_pass_fraction(corr[:, s], min(5, n_channels))
            for s in range(len(SHAPES))
        ]

    shape_ids = {model.vocab.id_for(s): i for i, s in enumerate(SHAPES)}
    hits = 0.0
    total = 0
    with T.no_grad():
        for ex in examples:
            base = model.prepare(ex.image_tensor())
            state = DecoderState.zero(model.config.hidden_dim)
            inputs = [START] + list(ex.token_ids)
            targets = list(ex.token_ids) + [END]
            for y_prev, target in zip(inputs, targets):
                p, state, attn = model.step(state, y_prev, base)
                if target not in shape_ids:
                    continue
                s = shape_ids[target]
                if beta_mode == "uniform":
                    hits += chance[s]
                    total += 1
                    continue
                if beta_mode == "model":
                    beta = attn[-1].beta.data
                else:
                    beta = np.zeros(n_channels)
                    beta[int(np.argmax(corr[:, s]))] = 1.0
                positive = np.flatnonzero(beta > 0.0)
                top = positive[np.lexsort((positive, -beta[positive]))][:5]
                if corr[top, s].mean() > corr[:, s].mean():
                    hits += 1
                total += 1
    return hits / total if total else 0.0


def _subset_pass_fraction(values, k):
    """Fraction of k-element subsets whose mean exceeds the overall mean."""
    n = len(values)
    passes = 0
    count = 0
    threshold = values.mean() * k
    for combo in itertools.combinations(range(n), k):
        count += 1
        if values[list(combo)].sum() > threshold:
            passes += 1
    return passes / count if count else 0.0
