"""Synthetic before/after scenes, feature-grid rendering and templated captions.

Scenes live on an H x W grid.  A scene pair differs by exactly one recorded
change (or none), and the "after" view is rendered under a global integer
translation plus per-cell Gaussian noise to imitate a viewpoint shift.

Per-sample randomness uses ``np.random.default_rng([seed, index])`` so any
sample of a dataset can be regenerated on its own.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
MATERIALS = ("rubber", "metal")
SIZES = ("small", "large")
CHANGE_TYPES = ("color", "texture", "add", "drop", "move", "none")

# change verb of every template; used to read the change type back out of a caption
CHANGE_VERBS = {
    "turned": "color",
    "became": "texture",
    "added": "add",
    "disappeared": "drop",
    "moved": "move",
    "made": "none",
}

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
PAD_TAG = "<pad>"
# closed tag set of the template grammar; BOS/EOS are tagged "punct"
DEP_TAGS = ("root", "nsubj", "nsubjpass", "auxpass", "det", "amod",
            "prep", "pobj", "acomp", "punct")
NO_CHANGE_WORDS = ("no", "change", "was", "made")
NO_CHANGE_TAGS = ("det", "nsubjpass", "auxpass", "root")


class DatasetFormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    grid_h: int = 7
    grid_w: int = 7
    channels: int = 32
    n_objects_min: int = 3
    n_objects_max: int = 6
    change_weights: dict = field(default_factory=lambda: {k: 1.0 for k in CHANGE_TYPES})
    jitter_max: int = 1
    noise_sigma: float = 0.05
    seed: int = 0
    embed_seed: int = 1234
    footprint_sigma: float = 1.0
    n_train: int = 2000
    n_val: int = 500

    def validate(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1 or self.channels < 1:
            raise ValueError("grid_h, grid_w and channels must be positive")
        if self.n_objects_min < 2 or self.n_objects_max < self.n_objects_min:
            raise ValueError("need 2 <= n_objects_min <= n_objects_max")
        if self.jitter_max < 0 or self.noise_sigma < 0:
            raise ValueError("jitter_max and noise_sigma must be non-negative")
        unknown = set(self.change_weights) - set(CHANGE_TYPES)
        if unknown:
            raise ValueError(f"unknown change types in change_weights: {sorted(unknown)}")
        if any(w < 0 for w in self.change_weights.values()) or sum(self.change_weights.values()) <= 0:
            raise ValueError("change_weights must be non-negative with a positive sum")
        if len(placement_cells(self)) < self.n_objects_max + 1:
            raise ValueError(
                f"grid {self.grid_h}x{self.grid_w} with jitter margin {self.jitter_max} has "
                f"{len(placement_cells(self))} cells, too few for {self.n_objects_max} objects plus one")


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    color: str
    material: str
    size: str
    position: tuple[int, int]

    def with_(self, **changes) -> SceneObject:
        return SceneObject(**{**asdict(self), **changes})


@dataclass(frozen=True)
class Change:
    kind: str
    object_id: int | None = None
    before: SceneObject | None = None
    after: SceneObject | None = None


@dataclass(frozen=True)
class Jitter:
    drow: int = 0
    dcol: int = 0
    sigma: float = 0.0
    noise_seed: int = 0

    @property
    def magnitude(self) -> int:
        return abs(self.drow) + abs(self.dcol)


@dataclass(frozen=True)
class ScenePair:
    before: tuple[SceneObject, ...]
    after: tuple[SceneObject, ...]
    change: Change
    jitter: Jitter
    grid: tuple[int, int] = (7, 7)


@dataclass(frozen=True)
class CaptionSample:
    tokens: tuple[int, ...]
    dep_tags: tuple[int, ...]
    change_type: str
    footprint: frozenset


@dataclass(frozen=True)
class Sample:
    pair: ScenePair
    caption: CaptionSample


# ---------------------------------------------------------------------------
# scene sampling


def placement_cells(config: SceneConfig) -> list[tuple[int, int]]:
    """Cells far enough from the border that jittered objects stay on the grid."""
    m = config.jitter_max
    return [(r, c) for r in range(m, config.grid_h - m) for c in range(m, config.grid_w - m)]


def _random_object(rng: np.random.Generator, oid: int, position) -> SceneObject:
    return SceneObject(
        id=oid,
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS[rng.integers(len(COLORS))],
        material=MATERIALS[rng.integers(len(MATERIALS))],
        size=SIZES[rng.integers(len(SIZES))],
        position=(int(position[0]), int(position[1])),
    )


def sample_scene_pair(rng: np.random.Generator, config: SceneConfig) -> ScenePair:
    config.validate()
    cells = placement_cells(config)
    n = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
    chosen = rng.permutation(len(cells))
    occupied = [cells[i] for i in chosen[:n]]
    free = [cells[i] for i in chosen[n:]]
    before = tuple(_random_object(rng, i, pos) for i, pos in enumerate(occupied))

    weights = np.array([config.change_weights.get(k, 0.0) for k in CHANGE_TYPES], dtype=float)
    kind = CHANGE_TYPES[rng.choice(len(CHANGE_TYPES), p=weights / weights.sum())]

    after = list(before)
    if kind == "none":
        change = Change("none")
    elif kind == "add":
        new = _random_object(rng, n, free[0])
        after.append(new)
        change = Change("add", new.id, None, new)
    else:
        target = before[int(rng.integers(n))]
        if kind == "drop":
            after.remove(target)
            changed = None
        elif kind == "color":
            options = [c for c in COLORS if c != target.color]
            changed = target.with_(color=options[rng.integers(len(options))])
        elif kind == "texture":
            changed = target.with_(material="metal" if target.material == "rubber" else "rubber")
        else:  # move
            changed = target.with_(position=free[0])
        if changed is not None:
            after[after.index(target)] = changed
        change = Change(kind, target.id, target, changed)

    j = config.jitter_max
    drow, dcol = (int(v) for v in rng.integers(-j, j + 1, size=2))
    jitter = Jitter(drow, dcol, float(config.noise_sigma), int(rng.integers(2**31 - 1)))
    return ScenePair(before, tuple(after), change, jitter, (config.grid_h, config.grid_w))


# ---------------------------------------------------------------------------
# rendering


@lru_cache(maxsize=8)
def attribute_embeddings(channels: int, seed: int) -> dict[str, np.ndarray]:
    """Fixed random embedding per attribute value, plus the background vector."""
    rng = np.random.default_rng(seed)
    table = {"background": rng.normal(0.0, 0.5, channels)}
    for values in (SHAPES, COLORS, MATERIALS, SIZES):
        for v in values:
            table[v] = rng.normal(0.0, 1.0, channels)
    return table


def object_embedding(obj: SceneObject, table) -> np.ndarray:
    return table[obj.shape] + table[obj.color] + table[obj.material] + table[obj.size]


def render_feature_grid(objects: Sequence[SceneObject], jitter: Jitter | None, config: SceneConfig) -> np.ndarray:
    """Render a C x H x W grid.

    Every cell holds the background vector plus, for each object, its
    attribute embedding weighted by a Gaussian of the distance from the cell to
    the (translated) object position.  Noise is drawn from ``jitter.noise_seed``.
    """
    jitter = jitter or Jitter()
    table = attribute_embeddings(config.channels, config.embed_seed)
    rows, cols = np.meshgrid(np.arange(config.grid_h), np.arange(config.grid_w), indexing="ij")
    grid = np.broadcast_to(table["background"][:, None, None],
                           (config.channels, config.grid_h, config.grid_w)).copy()
    two_s2 = 2.0 * config.footprint_sigma ** 2
    for obj in objects:
        r = obj.position[0] + jitter.drow
        c = obj.position[1] + jitter.dcol
        weight = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / two_s2)
        grid += object_embedding(obj, table)[:, None, None] * weight[None]
    if jitter.sigma > 0:
        grid += np.random.default_rng(jitter.noise_seed).normal(0.0, jitter.sigma, grid.shape)
    return grid


def render_pair(pair: ScenePair, config: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """(before, after) grids; only the after view is translated and noised."""
    return (render_feature_grid(pair.before, None, config),
            render_feature_grid(pair.after, pair.jitter, config))


# ---------------------------------------------------------------------------
# captions


def _nearest(obj: SceneObject, scene: Sequence[SceneObject]) -> SceneObject:
    others = [o for o in scene if o.id != obj.id]
    return min(others, key=lambda o: ((o.position[0] - obj.position[0]) ** 2
                                      + (o.position[1] - obj.position[1]) ** 2, o.id))


def caption_words(pair: ScenePair) -> tuple[list[str], list[str]]:
    """Template sentence for a pair and its gold dependency tags (no BOS/EOS)."""
    ch = pair.change
    if ch.kind == "none":
        return list(NO_CHANGE_WORDS), list(NO_CHANGE_TAGS)
    obj = ch.before if ch.before is not None else ch.after
    scene = pair.after if ch.kind == "add" else pair.before
    ref = _nearest(obj, scene)
    noun_phrase = [obj.size, obj.color, obj.material, obj.shape]
    referent = ["near", "the", ref.color, ref.shape]
    referent_tags = ["prep", "det", "amod", "pobj"]
    if ch.kind == "add":
        words = ["a", *noun_phrase, "was", "added", *referent]
        tags = ["det", "amod", "amod", "amod", "nsubjpass", "auxpass", "root", *referent_tags]
        return words, tags
    # the referent sits between the subject noun and the verb
    words = ["the", *noun_phrase, *referent]
    tags = ["det", "amod", "amod", "amod", "nsubj", *referent_tags]
    if ch.kind == "color":
        words += ["turned", ch.after.color]
        tags += ["root", "acomp"]
    elif ch.kind == "texture":
        words += ["became", ch.after.material]
        tags += ["root", "acomp"]
    elif ch.kind == "drop":
        words.append("disappeared")
        tags.append("root")
    else:
        words.append("moved")
        tags.append("root")
    return words, tags


def _block(center, grid, shift=(0, 0)) -> set[tuple[int, int]]:
    r0, c0 = center[0] + shift[0], center[1] + shift[1]
    return {(r, c) for r in range(r0 - 1, r0 + 2) for c in range(c0 - 1, c0 + 2)
            if 0 <= r < grid[0] and 0 <= c < grid[1]}


def change_footprint(pair: ScenePair) -> frozenset:
    """Cells covered by the changed object, in the frame where it is pointed at.

    Drops are located in the before view; everything else in the (translated)
    after view.  A move covers both its old and new locations.
    """
    ch = pair.change
    shift = (pair.jitter.drow, pair.jitter.dcol)
    if ch.kind == "none":
        return frozenset()
    if ch.kind == "drop":
        return frozenset(_block(ch.before.position, pair.grid))
    cells = _block(ch.after.position, pair.grid, shift)
    if ch.kind == "move":
        cells |= _block(ch.before.position, pair.grid, shift)
    return frozenset(cells)


def change_type_from_words(words: Sequence[str]) -> str:
    for w in words:
        if w in CHANGE_VERBS:
            return CHANGE_VERBS[w]
    return "unknown"


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    tokens: list[str]
    tags: list[str]

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.tag_to_id = {t: i for i, t in enumerate(self.tags)}
        if len(self.token_to_id) != len(self.tokens) or len(self.tag_to_id) != len(self.tags):
            raise ValueError("vocabulary entries must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def n_tags(self) -> int:
        return len(self.tags)

    pad_id = property(lambda self: self.token_to_id[PAD])
    bos_id = property(lambda self: self.token_to_id[BOS])
    eos_id = property(lambda self: self.token_to_id[EOS])
    unk_id = property(lambda self: self.token_to_id[UNK])
    pad_tag_id = property(lambda self: self.tag_to_id[PAD_TAG])

    def encode(self, words: Sequence[str], strict: bool = True) -> list[int]:
        ids = []
        for w in words:
            if w in self.token_to_id:
                ids.append(self.token_to_id[w])
            elif strict:
                raise KeyError(f"token {w!r} not in vocabulary")
            else:
                ids.append(self.unk_id)
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def encode_tags(self, tags: Sequence[str]) -> list[int]:
        try:
            return [self.tag_to_id[t] for t in tags]
        except KeyError as e:
            raise KeyError(f"dependency tag {e.args[0]!r} not in tagset") from None

    def decode_tags(self, ids: Iterable[int]) -> list[str]:
        return [self.tags[i] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "tags": list(self.tags)}

    @classmethod
    def from_dict(cls, d: dict) -> Vocabulary:
        return cls(list(d["tokens"]), list(d["tags"]))


def _ranked(counter: Counter) -> list[str]:
    return [w for w, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))]


def build_vocabulary(corpus: Iterable[Sequence[str]], tag_corpus: Iterable[Sequence[str]] | None = None) -> Vocabulary:
    """Vocabulary ordered by descending frequency, ties broken lexicographically.

    Specials come first (PAD=0, BOS=1, EOS=2, UNK=3).  Without ``tag_corpus``
    the tagset is the template grammar's full tag list.
    """
    counts = Counter(w for sentence in corpus for w in sentence if w not in SPECIAL_TOKENS)
    if not counts:
        raise ValueError("corpus is empty")
    if tag_corpus is None:
        tags = list(DEP_TAGS)
    else:
        tags = _ranked(Counter(t for seq in tag_corpus for t in seq if t != PAD_TAG))
    return Vocabulary(list(SPECIAL_TOKENS) + _ranked(counts), [PAD_TAG] + tags)


def grammar_corpus() -> list[list[str]]:
    """Sentences covering every word the templates can emit."""
    return [
        ["the", "a", "near", "was", "added", "turned", "became", "disappeared", "moved"],
        list(NO_CHANGE_WORDS),
        list(SIZES), list(COLORS), list(MATERIALS), list(SHAPES),
    ]


def grammar_vocabulary() -> Vocabulary:
    return build_vocabulary(grammar_corpus())


def realize_caption(pair: ScenePair, vocab: Vocabulary) -> CaptionSample:
    words, tags = caption_words(pair)
    tokens = [vocab.bos_id, *vocab.encode(words), vocab.eos_id]
    tag_ids = vocab.encode_tags(["punct", *tags, "punct"])
    return CaptionSample(tuple(tokens), tuple(tag_ids), pair.change.kind, change_footprint(pair))


def generate_dataset(config: SceneConfig, n: int, vocab: Vocabulary, offset: int = 0) -> list[Sample]:
    """Samples ``offset .. offset + n - 1`` of the stream defined by ``config.seed``."""
    samples = []
    for i in range(offset, offset + n):
        pair = sample_scene_pair(np.random.default_rng([config.seed, i]), config)
        samples.append(Sample(pair, realize_caption(pair, vocab)))
    return samples


# ---------------------------------------------------------------------------
# persistence (JSON lines)


def _object_record(o: SceneObject | None):
    if o is None:
        return None
    return {"id": o.id, "shape": o.shape, "color": o.color, "material": o.material,
            "size": o.size, "position": list(o.position)}


def _object_from(d) -> SceneObject | None:
    if d is None:
        return None
    return SceneObject(int(d["id"]), d["shape"], d["color"], d["material"], d["size"],
                       (int(d["position"][0]), int(d["position"][1])))


def sample_to_record(s: Sample) -> dict:
    p, c = s.pair, s.caption
    return {
        "grid": list(p.grid),
        "before": [_object_record(o) for o in p.before],
        "after": [_object_record(o) for o in p.after],
        "change": {"kind": p.change.kind, "object_id": p.change.object_id,
                   "before": _object_record(p.change.before), "after": _object_record(p.change.after)},
        "jitter": {"drow": p.jitter.drow, "dcol": p.jitter.dcol,
                   "sigma": p.jitter.sigma, "noise_seed": p.jitter.noise_seed},
        "tokens": list(c.tokens),
        "dep_tags": list(c.dep_tags),
        "change_type": c.change_type,
        "footprint": sorted([list(cell) for cell in c.footprint]),
    }


def sample_from_record(d: dict) -> Sample:
    ch = d["change"]
    j = d["jitter"]
    pair = ScenePair(
        before=tuple(_object_from(o) for o in d["before"]),
        after=tuple(_object_from(o) for o in d["after"]),
        change=Change(ch["kind"], ch["object_id"], _object_from(ch["before"]), _object_from(ch["after"])),
        jitter=Jitter(int(j["drow"]), int(j["dcol"]), float(j["sigma"]), int(j["noise_seed"])),
        grid=(int(d["grid"][0]), int(d["grid"][1])),
    )
    caption = CaptionSample(
        tokens=tuple(int(t) for t in d["tokens"]),
        dep_tags=tuple(int(t) for t in d["dep_tags"]),
        change_type=d["change_type"],
        footprint=frozenset((int(r), int(c)) for r, c in d["footprint"]),
    )
    if len(caption.tokens) != len(caption.dep_tags):
        raise ValueError("tokens and dep_tags differ in length")
    return Sample(pair, caption)


def save_dataset(samples: Iterable[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")) + "\n")


def load_dataset(path) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(sample_from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError, IndexError) as e:
                raise DatasetFormatError(f"{Path(path).name}: malformed record on line {lineno}: {e}") from e
    return samples


def jitter_magnitude(pair: ScenePair) -> int:
    return pair.jitter.magnitude

