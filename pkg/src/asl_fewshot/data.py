"""Attribute-annotated image corpora and N-way M-shot episode sampling."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, FormatError, IngestionError, SamplingError
from .seeding import derive_rng

PathLike = Union[str, Path]

# RGB directions for the attribute traits: primaries then secondaries
TRAIT_COLORS = np.array(
    [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1]], dtype=np.float64
)
TRAIT_PATTERNS = ("solid", "hstripe", "vstripe", "checker")


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    attributes: np.ndarray
    label: int


@dataclass
class Corpus:
    """Images (n, H, W, 3) in [0, 1], attributes (n, A) in [0, 1], integer labels.

    ``class_attributes`` holds the class-level attribute vector of each
    category, indexed by label; ``class_names`` maps labels to source ids.
    """

    images: np.ndarray
    attributes: np.ndarray
    labels: np.ndarray
    class_attributes: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [str(i) for i in range(len(self.class_attributes))]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], self.attributes[i], int(self.labels[i]))

    @property
    def num_classes(self) -> int:
        return len(self.class_attributes)

    @property
    def num_attributes(self) -> int:
        return self.attributes.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def attribute_groups(num_attributes: int, group_size: int) -> list[list[int]]:
    """Consecutive attribute indices grouped by ``group_size``.

    A group of several attributes is one-hot (exactly one is set per class,
    like a part that takes one of a few colours); a group of one is a free
    binary attribute. A trailing singleton is folded into the group before it.
    """
    if group_size < 1:
        raise ConfigError(f"group_size must be positive, got {group_size}")
    groups = [list(range(i, min(i + group_size, num_attributes))) for i in range(0, num_attributes, group_size)]
    if group_size > 1 and len(groups) > 1 and len(groups[-1]) == 1:
        groups[-2].extend(groups.pop())
    return groups


def _group_options(group: list[int]) -> int:
    return 2 if len(group) == 1 else len(group)


def prototype_budget(groups: list[list[int]]) -> int:
    """How many distinct nonzero prototypes a grouping admits."""
    total = math.prod(_group_options(g) for g in groups)
    return total - 1 if all(len(g) == 1 for g in groups) else total


def choose_group_size(num_attributes: int, num_classes: int) -> int:
    """Largest of 4, 2, 1 whose grouping still gives every class its own prototype."""
    for size in (4, 2, 1):
        if prototype_budget(attribute_groups(num_attributes, size)) >= num_classes:
            return size
    return 1


def _code_to_vector(choice: Sequence[int], groups: list[list[int]], num_attributes: int) -> np.ndarray:
    vec = np.zeros(num_attributes)
    for pick, group in zip(choice, groups):
        if len(group) == 1:
            vec[group[0]] = pick
        else:
            vec[group[pick]] = 1.0
    return vec


def _class_prototypes(num_classes: int, groups: list[list[int]], rng: np.random.Generator) -> np.ndarray:
    """Distinct nonzero binary attribute vectors, as far apart as cheaply possible."""
    num_attributes = sum(len(g) for g in groups)
    options = [_group_options(g) for g in groups]
    budget = prototype_budget(groups)
    if budget < num_classes:
        raise ConfigError(
            f"{num_attributes} attributes in groups {[len(g) for g in groups]} give only {budget} "
            f"distinct prototypes, {num_classes} classes requested"
        )
    for min_dist in range(max(1, num_attributes // 4), 0, -1):
        protos: list[np.ndarray] = []
        for _ in range(200 * num_classes):
            cand = _code_to_vector([rng.integers(0, n) for n in options], groups, num_attributes)
            if not cand.any():
                continue
            if all(np.abs(cand - p).sum() >= min_dist for p in protos):
                protos.append(cand)
                if len(protos) == num_classes:
                    return np.stack(protos)
    # dense fallback: enumerate codes in order, always succeeds given the budget check
    vectors = (_code_to_vector(c, groups, num_attributes) for c in itertools.product(*(range(n) for n in options)))
    return np.array(list(itertools.islice((v for v in vectors if v.any()), num_classes)))


def trait_layout(num_attributes: int, image_size: int, group_size: int = 4) -> dict:
    """Image region of each attribute group plus the colour and pattern of each trait.

    Every group owns one region of a square grid and one stripe pattern; the
    attributes inside a group differ by colour, so each (colour, pattern)
    pair names a single attribute.
    """
    groups = attribute_groups(num_attributes, group_size)
    grid = math.ceil(math.sqrt(len(groups)))
    region = image_size // grid
    if region < 4:
        raise ConfigError(f"image size {image_size} too small for {len(groups)} attribute regions")
    traits = []
    for g, group in enumerate(groups):
        for j, _ in enumerate(group):
            traits.append(
                {
                    "group": g,
                    "color": TRAIT_COLORS[(j + len(group) * (g // len(TRAIT_PATTERNS))) % len(TRAIT_COLORS)],
                    "pattern": TRAIT_PATTERNS[g % len(TRAIT_PATTERNS)],
                }
            )
    return {"groups": groups, "grid": grid, "region": region, "margin": max(2, region // 3), "traits": traits}


def _pattern_mask(pattern: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if pattern == "solid":
        return np.ones((size, size))
    if pattern == "hstripe":
        return (yy % 2 == 0).astype(np.float64)
    if pattern == "vstripe":
        return (xx % 2 == 0).astype(np.float64)
    return ((yy + xx) % 2 == 0).astype(np.float64)


def render_image(
    attributes: np.ndarray,
    layout: dict,
    image_size: int,
    rng: np.random.Generator,
    pixel_noise: float,
    max_distractors: int,
    trait_amplitude: float = 0.8,
    trait_dropout: float = 0.0,
) -> np.ndarray:
    """Draw one image whose traits are scaled by ``attributes``.

    Each group paints a patterned square at a jittered spot inside its region;
    every attribute of the group adds its colour with amplitude proportional
    to its value. With probability ``trait_dropout`` a group is left out of
    the picture (an occluded part) while its annotation is kept.
    """
    img = np.full((image_size, image_size, 3), rng.uniform(0.05, 0.25))
    img += rng.uniform(-0.05, 0.05, size=3)  # colour cast
    grid, region, margin = layout["grid"], layout["region"], layout["margin"]
    size = region - margin
    for g, group in enumerate(layout["groups"]):
        dy, dx = rng.integers(0, margin + 1, size=2)
        r0, c0 = (g // grid) * region + dy, (g % grid) * region + dx
        if trait_dropout > 0 and rng.random() < trait_dropout:
            continue
        for i in group:
            if attributes[i] <= 0:
                continue
            trait = layout["traits"][i]
            patch = _pattern_mask(trait["pattern"], size)[..., None] * trait["color"]
            img[r0 : r0 + size, c0 : c0 + size] += patch * (trait_amplitude * attributes[i])
    # class-irrelevant discs at random places
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    for _ in range(rng.integers(0, max_distractors + 1)):
        cy, cx = rng.uniform(0, image_size, size=2)
        radius = rng.uniform(1.5, image_size / 8)
        disc = ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius**2
        img[disc] += rng.uniform(0.0, 0.7, size=3)
    img += rng.normal(0.0, pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(
    num_classes: int = 20,
    samples_per_class: int = 40,
    num_attributes: int = 16,
    image_size: int = 32,
    seed: int = 0,
    attribute_jitter: float = 0.1,
    pixel_noise: float = 0.05,
    max_distractors: int = 3,
    trait_amplitude: float = 0.8,
    trait_dropout: float = 0.0,
    group_size: Optional[int] = None,
) -> Corpus:
    """Procedural corpus in which every attribute drives one visible trait.

    Attributes come in one-hot groups (a part and its colour/pattern), each
    group owning one image region. Class ``c`` has a binary prototype vector;
    each image draws its own attributes as the prototype plus uniform jitter of
    at most ``attribute_jitter`` (clamped to [0, 1]) and renders every group as
    a patterned square at a small random offset inside its region, each
    attribute adding its colour in proportion to its value. Distractor discs,
    pixel noise and optional whole-group occlusion (``trait_dropout``) add
    nuisance variation unrelated to the class. ``group_size=None`` picks the
    largest group size that still yields ``num_classes`` distinct prototypes.
    """
    if num_attributes < 4:
        raise ConfigError(f"need at least 4 attributes, got {num_attributes}")
    if num_classes < 10:
        raise ConfigError(f"need at least 10 classes, got {num_classes}")
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be positive")
    if not 0.0 <= trait_dropout < 1.0:
        raise ConfigError(f"trait_dropout must lie in [0, 1), got {trait_dropout}")
    if group_size is None:
        group_size = choose_group_size(num_attributes, num_classes)
    layout = trait_layout(num_attributes, image_size, group_size)
    protos = _class_prototypes(num_classes, layout["groups"], derive_rng(seed, "prototypes"))
    render_rng = derive_rng(seed, "render")

    n = num_classes * samples_per_class
    images = np.empty((n, image_size, image_size, 3))
    attrs = np.empty((n, num_attributes))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    for i, c in enumerate(labels):
        jitter = render_rng.uniform(-attribute_jitter, attribute_jitter, size=num_attributes)
        attrs[i] = np.clip(protos[c] + jitter, 0.0, 1.0)
        images[i] = render_image(
            attrs[i], layout, image_size, render_rng, pixel_noise, max_distractors, trait_amplitude,
            trait_dropout,
        )
    return Corpus(images, attrs, labels, protos)


# ---------------------------------------------------------------------------
# file corpora
# ---------------------------------------------------------------------------


def read_attribute_file(path: PathLike) -> tuple[list[str], np.ndarray]:
    """Parse ``A <count> MAX <max>`` then ``class_id v1 .. vA`` rows; rescale to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"attribute file not found: {path}")
    lines = [ln.split() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty attribute file")
    header = lines[0]
    if len(header) != 4 or header[0] != "A" or header[2] != "MAX":
        raise FormatError(f"{path}: first line must be 'A <count> MAX <max_raw_value>', got {' '.join(header)!r}")
    try:
        count, max_raw = int(header[1]), float(header[3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header values: {exc}") from None
    if count < 1 or max_raw <= 0:
        raise FormatError(f"{path}: attribute count and max must be positive")
    ids, rows = [], []
    for lineno, row in enumerate(lines[1:], start=2):
        if len(row) - 1 != count:
            raise FormatError(f"{path}:{lineno}: expected {count} attribute values, got {len(row) - 1}")
        try:
            values = np.array([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if (values < 0).any():
            raise FormatError(f"{path}:{lineno}: negative attribute strength")
        ids.append(row[0])
        rows.append(np.clip(values / max_raw, 0.0, 1.0))
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate class ids")
    return ids, np.array(rows).reshape(len(rows), count)


def load_image(path: Path, size: Optional[int] = None) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise IngestionError(f"image not found: {path}") from None
    except OSError as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from None


def load_manifest(manifest_path: PathLike, attributes_path: PathLike, image_size: Optional[int] = None) -> Corpus:
    """Load a ``path,class_id`` CSV manifest plus its class attribute file.

    Relative image paths resolve against the manifest's directory. Class-level
    attributes are copied to every image of the class.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found: {manifest_path}")
    class_ids, class_attrs = read_attribute_file(attributes_path)
    label_of = {cid: i for i, cid in enumerate(class_ids)}

    images, labels = [], []
    with manifest_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "class_id"]:
            raise FormatError(f"{manifest_path}: header must be 'path,class_id'")
        for lineno, row in enumerate(reader, start=2):
            cid = row["class_id"].strip()
            if cid not in label_of:
                raise FormatError(f"{manifest_path}:{lineno}: class {cid!r} missing from attribute file")
            img_path = Path(row["path"].strip())
            if not img_path.is_absolute():
                img_path = manifest_path.parent / img_path
            if not img_path.is_file():
                raise IngestionError(f"image not found: {img_path}")
            images.append(load_image(img_path, image_size))
            labels.append(label_of[cid])
    if not images:
        raise FormatError(f"{manifest_path}: no images listed")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"images have differing extents {sorted(shapes)}; pass image_size to resize")
    labels_arr = np.array(labels)
    return Corpus(np.stack(images), class_attrs[labels_arr].copy(), labels_arr, class_attrs, class_ids)


def write_corpus(corpus: Corpus, out_dir: PathLike) -> Path:
    """Write PNG images, ``manifest.csv`` and ``attributes.txt`` (class level, MAX 1)."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(corpus)):
        rel = f"images/{i:05d}.png"
        pixels = np.round(corpus.images[i] * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(out_dir / rel, format="PNG")
        rows.append((rel, corpus.class_names[corpus.labels[i]]))
    with (out_dir / "manifest.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "class_id"])
        writer.writerows(rows)
    lines = [f"A {corpus.num_attributes} MAX 1"]
    for name, vec in zip(corpus.class_names, corpus.class_attributes):
        lines.append(name + " " + " ".join(repr(float(v)) for v in vec))
    (out_dir / "attributes.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_dir


# ---------------------------------------------------------------------------
# splits and episodes
# ---------------------------------------------------------------------------


@dataclass
class ClassPool:
    """The categories one side of a split may draw episodes from."""

    corpus: Corpus
    classes: list[int]
    index: dict[int, np.ndarray]


@dataclass
class CorpusSplit:
    corpus: Corpus
    train: ClassPool
    test: ClassPool

    @property
    def train_classes(self) -> list[int]:
        return self.train.classes

    @property
    def test_classes(self) -> list[int]:
        return self.test.classes


def split_corpus(corpus: Corpus, train_classes: Union[int, Sequence[int]]) -> CorpusSplit:
    """Partition categories into disjoint train and test pools.

    An integer takes the first that many labels for training.
    """
    all_classes = sorted(set(int(c) for c in corpus.labels))
    if isinstance(train_classes, int):
        if not 0 < train_classes < len(all_classes):
            raise ConfigError(f"cannot put {train_classes} of {len(all_classes)} classes in training")
        train = all_classes[:train_classes]
    else:
        train = sorted(int(c) for c in train_classes)
    unknown = set(train) - set(all_classes)
    if unknown:
        raise ConfigError(f"unknown training classes {sorted(unknown)}")
    test = [c for c in all_classes if c not in set(train)]
    index = {c: np.flatnonzero(corpus.labels == c) for c in all_classes}
    return CorpusSplit(
        corpus,
        ClassPool(corpus, train, {c: index[c] for c in train}),
        ClassPool(corpus, test, {c: index[c] for c in test}),
    )


@dataclass
class Episode:
    """One N-way M-shot task; support is class-major, labels renumbered 0..N-1."""

    n_way: int
    m_shot: int
    support_images: np.ndarray
    support_attributes: np.ndarray
    support_labels: np.ndarray
    support_ids: np.ndarray
    query_images: np.ndarray
    query_attributes: np.ndarray
    query_labels: np.ndarray
    query_ids: np.ndarray
    class_map: list[int]

    @property
    def num_query(self) -> int:
        return len(self.query_labels)


def sample_episode(pool: ClassPool, n_way: int, m_shot: int, q_per_class: int, rng: np.random.Generator) -> Episode:
    """Draw N categories, then M support and ``q_per_class`` query samples from each."""
    if n_way < 1 or m_shot < 1 or q_per_class < 1:
        raise SamplingError("n_way, m_shot and q_per_class must all be positive")
    if len(pool.classes) < n_way:
        raise SamplingError(f"{n_way}-way episode needs {n_way} categories, pool has {len(pool.classes)}")
    need = m_shot + q_per_class
    short = [c for c in pool.classes if len(pool.index[c]) < need]
    if short:
        raise SamplingError(f"categories {short} have fewer than {need} samples")

    chosen = rng.choice(len(pool.classes), size=n_way, replace=False)
    class_map = [pool.classes[i] for i in chosen]
    s_ids, q_ids = [], []
    for c in class_map:
        picks = rng.choice(pool.index[c], size=need, replace=False)
        s_ids.append(picks[:m_shot])
        q_ids.append(picks[m_shot:])
    s_ids_arr = np.concatenate(s_ids)
    q_ids_arr = np.concatenate(q_ids)
    corpus = pool.corpus
    return Episode(
        n_way=n_way,
        m_shot=m_shot,
        support_images=corpus.images[s_ids_arr],
        support_attributes=corpus.attributes[s_ids_arr],
        support_labels=np.repeat(np.arange(n_way), m_shot),
        support_ids=s_ids_arr,
        query_images=corpus.images[q_ids_arr],
        query_attributes=corpus.attributes[q_ids_arr],
        query_labels=np.repeat(np.arange(n_way), q_per_class),
        query_ids=q_ids_arr,
        class_map=class_map,
    )
