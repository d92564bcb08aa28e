"""Procedural tabletop scenes with template referring expressions.

A scene is a square floor at z = 0 plus a handful of primitive objects
(boxes, cylinders, spheres) with surface-sampled points and palette
colors.  Placement is rejection-sampled so footprints never overlap,
and every scene carries a distractor: object 2 shares object 1's shape
in a different color, so color words are always informative.

Queries come from two templates, "the {color} {shape}" and
"the {color} {shape} {relation} the {color2} {shape2}", where the
relation is "near" (center distance within a radius) or "left of"
(strictly smaller x).  A template is only used when exactly one object
satisfies it, verified by evaluating the predicate against every
object, and relation anchors must themselves be unique by color+shape.

Corpus layout on disk, one directory per scene::

    corpus/
      vocab.txt                  one token per line, line = id - 2
      scene_00000/
        points.bin               point table, see sparse.save_point_cloud
        labels.txt               one "semantic instance" pair per line
        samples.txt              tab-separated sample records

Each samples.txt line holds sample id, target instance id, point
count, query text, and the run-length-encoded binary mask.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GenerationError
from .metrics import LabelSet, instance_to_binary, rle_decode, rle_encode
from .sparse import load_point_cloud, save_point_cloud
from .text import Vocabulary, tokenize

MAX_WORKERS_ENV = "REFSEG3D_MAX_WORKERS"

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.80, 0.10, 0.10),
    "green": (0.10, 0.70, 0.10),
    "blue": (0.10, 0.20, 0.80),
    "yellow": (0.85, 0.80, 0.10),
    "purple": (0.55, 0.15, 0.60),
    "orange": (0.90, 0.50, 0.10),
    "white": (0.90, 0.90, 0.90),
    "gray": (0.50, 0.50, 0.50),
}
FLOOR_COLOR = (0.35, 0.30, 0.25)
COLOR_JITTER = 0.05

SHAPES = ("box", "cylinder", "sphere")
SEMANTIC_FLOOR = 0
SEMANTIC_OF_SHAPE = {"box": 1, "cylinder": 2, "sphere": 3}

RELATIONS = ("near", "left of")


@dataclass
class SceneSpec:
    object_count: tuple[int, int] = (4, 8)
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(PALETTE)
    floor_extent: float = 4.0
    floor_points: int = 800
    points_per_object: tuple[int, int] = (150, 400)
    near_radius: float = 0.9
    max_place_tries: int = 100

    def __post_init__(self):
        if self.object_count[0] < 1 or self.object_count[0] > self.object_count[1]:
            raise ContractError(f"bad object count range {self.object_count}")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ContractError(f"unknown shapes {sorted(unknown)}")
        unknown = set(self.colors) - set(PALETTE)
        if unknown:
            raise ContractError(f"unknown colors {sorted(unknown)}")
        if self.object_count[1] >= 2 and len(self.colors) < 2:
            raise ContractError("need at least 2 colors for the distractor rule")
        if self.floor_extent <= 0 or self.floor_points < 1:
            raise ContractError("floor must have positive extent and points")
        if self.points_per_object[0] < 10:
            raise ContractError("objects need at least 10 points")


@dataclass
class SceneObject:
    instance_id: int
    shape: str
    color: str
    center: np.ndarray          # 3-d, z at the vertical midpoint
    footprint: np.ndarray       # (2, 2): [[xmin, ymin], [xmax, ymax]]


@dataclass
class Scene:
    points: np.ndarray
    labels: LabelSet
    objects: list[SceneObject]


@dataclass
class SceneSample:
    cloud: np.ndarray
    query_text: str
    tokens: list[int]
    targets: np.ndarray
    labels: LabelSet
    target_instance: int
    scene_id: str
    sample_id: str


def template_words() -> list[str]:
    """Every word the query templates can emit, sorted."""
    words = {"the", "near", "left", "of"}
    words.update(PALETTE)
    words.update(SHAPES)
    return sorted(words)


def default_vocabulary() -> Vocabulary:
    return Vocabulary(template_words())


# ---------------------------------------------------------------------------
# geometry


def _sample_box(rng, half, n):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        sel = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = u[sel, 0] * half[others[0]]
        pts[sel, others[1]] = u[sel, 1] * half[others[1]]
    return pts


def _sample_cylinder(rng, radius, height, n):
    lateral = 2.0 * np.pi * radius * height
    cap = np.pi * radius * radius
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    side = part == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(0.0, height, size=int(side.sum())) - height / 2.0
    for p, z in ((1, height / 2.0), (2, -height / 2.0)):
        sel = part == p
        rho = radius * np.sqrt(rng.uniform(0.0, 1.0, size=int(sel.sum())))
        pts[sel, 0] = rho * np.cos(theta[sel])
        pts[sel, 1] = rho * np.sin(theta[sel])
        pts[sel, 2] = z
    return pts


def _sample_sphere(rng, radius, n):
    dirs = rng.normal(size=(n, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    return radius * dirs


def _footprints_overlap(a: np.ndarray, b: np.ndarray, gap: float = 0.05) -> bool:
    return bool(np.all(a[0] - gap < b[1]) and np.all(b[0] - gap < a[1]))


def generate_scene(spec: SceneSpec, seed) -> Scene:
    """Floor plus non-overlapping primitives; deterministic per (spec, seed)."""
    rng = np.random.default_rng(seed)
    n_objects = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))

    shapes = [str(rng.choice(spec.shapes)) for _ in range(n_objects)]
    colors = [str(rng.choice(spec.colors)) for _ in range(n_objects)]
    if n_objects >= 2:
        shapes[1] = shapes[0]  # the distractor shares the target shape
        others = [c for c in spec.colors if c != colors[0]]
        colors[1] = others[int(rng.integers(len(others)))]

    half_extent = spec.floor_extent / 2.0
    objects: list[SceneObject] = []
    chunks: list[np.ndarray] = []
    sem_chunks: list[np.ndarray] = []
    inst_chunks: list[np.ndarray] = []

    floor = np.empty((spec.floor_points, 6))
    floor[:, 0] = rng.uniform(-half_extent, half_extent, size=spec.floor_points)
    floor[:, 1] = rng.uniform(-half_extent, half_extent, size=spec.floor_points)
    floor[:, 2] = 0.0
    floor[:, 3:] = np.clip(np.asarray(FLOOR_COLOR)
                           + rng.uniform(-COLOR_JITTER, COLOR_JITTER,
                                         size=(spec.floor_points, 3)), 0.0, 1.0)
    chunks.append(floor)
    sem_chunks.append(np.full(spec.floor_points, SEMANTIC_FLOOR, dtype=np.int64))
    inst_chunks.append(np.zeros(spec.floor_points, dtype=np.int64))

    for idx in range(n_objects):
        shape, color = shapes[idx], colors[idx]
        n_pts = int(rng.integers(spec.points_per_object[0],
                                 spec.points_per_object[1] + 1))
        if shape == "box":
            half = rng.uniform(0.15, 0.35, size=3)
            xy_half, height = half[:2], 2.0 * half[2]
        elif shape == "cylinder":
            radius = float(rng.uniform(0.12, 0.30))
            height = float(rng.uniform(0.25, 0.60))
            xy_half = np.array([radius, radius])
        else:
            radius = float(rng.uniform(0.12, 0.30))
            height = 2.0 * radius
            xy_half = np.array([radius, radius])

        placed = False
        for _ in range(spec.max_place_tries):
            cx = rng.uniform(-half_extent + xy_half[0], half_extent - xy_half[0])
            cy = rng.uniform(-half_extent + xy_half[1], half_extent - xy_half[1])
            footprint = np.array([[cx - xy_half[0], cy - xy_half[1]],
                                  [cx + xy_half[0], cy + xy_half[1]]])
            if not any(_footprints_overlap(footprint, o.footprint) for o in objects):
                placed = True
                break
        if not placed:
            raise GenerationError(f"object {idx + 1} found no free spot in "
                                  f"{spec.max_place_tries} tries; spec too crowded")

        if shape == "box":
            local = _sample_box(rng, half, n_pts)
        elif shape == "cylinder":
            local = _sample_cylinder(rng, radius, height, n_pts)
        else:
            local = _sample_sphere(rng, radius, n_pts)
        center = np.array([cx, cy, height / 2.0])
        pts = np.empty((n_pts, 6))
        pts[:, :3] = local + center
        pts[:, 3:] = np.clip(np.asarray(PALETTE[color])
                             + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=(n_pts, 3)),
                             0.0, 1.0)
        chunks.append(pts)
        sem_chunks.append(np.full(n_pts, SEMANTIC_OF_SHAPE[shape], dtype=np.int64))
        inst_chunks.append(np.full(n_pts, idx + 1, dtype=np.int64))
        objects.append(SceneObject(instance_id=idx + 1, shape=shape, color=color,
                                   center=center, footprint=footprint))

    labels = LabelSet(semantic=np.concatenate(sem_chunks),
                      instance=np.concatenate(inst_chunks))
    return Scene(points=np.concatenate(chunks), labels=labels, objects=objects)


# ---------------------------------------------------------------------------
# queries


def _matches(obj: SceneObject, color: str, shape: str) -> bool:
    return obj.color == color and obj.shape == shape


def _relation_holds(obj: SceneObject, anchor: SceneObject,
                    relation: str, near_radius: float) -> bool:
    if relation == "near":
        return float(np.linalg.norm(obj.center[:2] - anchor.center[:2])) <= near_radius
    return obj.center[0] < anchor.center[0]


def describe_candidates(scene: Scene, near_radius: float) -> list[tuple[str, int]]:
    """All (query, target id) pairs with exactly one satisfying object."""
    objs = scene.objects
    candidates: list[tuple[str, int]] = []
    for obj in objs:
        base = [o for o in objs if _matches(o, obj.color, obj.shape)]
        if len(base) == 1:
            candidates.append((f"the {obj.color} {obj.shape}", obj.instance_id))
    for anchor in objs:
        if sum(_matches(o, anchor.color, anchor.shape) for o in objs) != 1:
            continue  # the anchor reference itself must be unambiguous
        for relation in RELATIONS:
            seen: set[tuple[str, str]] = set()
            for obj in objs:
                if obj is anchor or (obj.color, obj.shape) in seen:
                    continue
                seen.add((obj.color, obj.shape))
                holds = [o for o in objs
                         if o is not anchor and _matches(o, obj.color, obj.shape)
                         and _relation_holds(o, anchor, relation, near_radius)]
                if len(holds) == 1:
                    candidates.append(
                        (f"the {obj.color} {obj.shape} {relation} "
                         f"the {anchor.color} {anchor.shape}",
                         holds[0].instance_id))
    return candidates


def generate_query(scene: Scene, spec: SceneSpec, seed) -> tuple[str, int]:
    """Pick one unambiguous description; deterministic per seed."""
    rng = np.random.default_rng(seed)
    candidates = describe_candidates(scene, spec.near_radius)
    if not candidates:
        raise GenerationError("no unambiguous referring expression exists")
    text, target = candidates[int(rng.integers(len(candidates)))]
    satisfied = _oracle_satisfying(scene, spec, text)
    if satisfied != [target]:
        raise GenerationError(f"query {text!r} matched instances {satisfied}")
    return text, target


def _oracle_satisfying(scene: Scene, spec: SceneSpec, query: str) -> list[int]:
    """Re-evaluate a template query against every object from scratch."""
    words = query.split()
    objs = scene.objects
    if len(words) == 3:
        _, color, shape = words
        return [o.instance_id for o in objs if _matches(o, color, shape)]
    if len(words) in (7, 8):  # "near" vs "left of"
        color, shape = words[1], words[2]
        relation = " ".join(words[3:-3])
        color2, shape2 = words[-2], words[-1]
        anchors = [o for o in objs if _matches(o, color2, shape2)]
        if len(anchors) != 1:
            return []
        anchor = anchors[0]
        return [o.instance_id for o in objs
                if o is not anchor and _matches(o, color, shape)
                and _relation_holds(o, anchor, relation, spec.near_radius)]
    raise ContractError(f"unrecognized query template: {query!r}")


def make_sample(spec: SceneSpec, seed, vocab: Vocabulary | None = None,
                scene_id: str = "scene_00000", sample_index: int = 0) -> SceneSample:
    if vocab is None:
        vocab = default_vocabulary()
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    scene_seed, query_seed = ss.spawn(2)
    scene = generate_scene(spec, scene_seed)
    text, target = generate_query(scene, spec, query_seed)
    targets = instance_to_binary(scene.labels, target)
    return SceneSample(cloud=scene.points, query_text=text,
                       tokens=tokenize(text, vocab), targets=targets,
                       labels=scene.labels, target_instance=target,
                       scene_id=scene_id, sample_id=f"{scene_id}:{sample_index}")


# ---------------------------------------------------------------------------
# corpus files


def _build_one(spec: SceneSpec, corpus_seed: int, index: int,
               vocab: Vocabulary, attempts: int = 20) -> SceneSample:
    scene_id = f"scene_{index:05d}"
    for attempt in range(attempts):
        key = np.random.SeedSequence(entropy=corpus_seed,
                                     spawn_key=(index, attempt))
        try:
            return make_sample(spec, key, vocab, scene_id=scene_id)
        except GenerationError:
            continue
    raise GenerationError(f"could not generate scene {index} in {attempts} attempts")


def generate_corpus(spec: SceneSpec, out_dir, count: int, seed: int) -> list[str]:
    """Write ``count`` one-sample scenes under ``out_dir``; returns scene ids.

    Samples are pure functions of (spec, seed, index), built in a small
    thread pool (capped by the REFSEG3D_MAX_WORKERS environment
    variable) and written in index order, so the corpus is identical
    however many workers run.
    """
    if count < 1:
        raise ContractError("corpus needs at least 1 sample")
    os.makedirs(out_dir, exist_ok=True)
    vocab = default_vocabulary()
    vocab.save(os.path.join(out_dir, "vocab.txt"))

    workers = min(count, int(os.environ.get(MAX_WORKERS_ENV, "4") or "4"))
    workers = max(workers, 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_build_one, spec, seed, i, vocab)
                   for i in range(count)]
        samples = [f.result() for f in futures]

    ids = []
    for sample in samples:
        scene_dir = os.path.join(out_dir, sample.scene_id)
        os.makedirs(scene_dir, exist_ok=True)
        save_point_cloud(os.path.join(scene_dir, "points.bin"),
                         sample.cloud, binary=True)
        with open(os.path.join(scene_dir, "labels.txt"), "w") as fh:
            for s, i in zip(sample.labels.semantic, sample.labels.instance):
                fh.write(f"{s} {i}\n")
        with open(os.path.join(scene_dir, "samples.txt"), "w") as fh:
            fh.write("\t".join([sample.sample_id, str(sample.target_instance),
                                str(sample.targets.size), sample.query_text,
                                rle_encode(sample.targets)]) + "\n")
        ids.append(sample.scene_id)
    return ids


def load_corpus(corpus_dir) -> tuple[list[SceneSample], Vocabulary]:
    """Read every scene directory in sorted order."""
    vocab_path = os.path.join(corpus_dir, "vocab.txt")
    if not os.path.exists(vocab_path):
        raise ContractError(f"{corpus_dir} has no vocab.txt; not a corpus?")
    vocab = Vocabulary.load(vocab_path)
    samples: list[SceneSample] = []
    for name in sorted(os.listdir(corpus_dir)):
        scene_dir = os.path.join(corpus_dir, name)
        if not (name.startswith("scene_") and os.path.isdir(scene_dir)):
            continue
        cloud = load_point_cloud(os.path.join(scene_dir, "points.bin"))
        sem_inst = np.loadtxt(os.path.join(scene_dir, "labels.txt"),
                              dtype=np.int64).reshape(-1, 2)
        labels = LabelSet(semantic=sem_inst[:, 0], instance=sem_inst[:, 1])
        with open(os.path.join(scene_dir, "samples.txt")) as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                sample_id, target, n, query, rle = line.split("\t")
                targets = rle_decode(rle, int(n))
                samples.append(SceneSample(
                    cloud=cloud, query_text=query,
                    tokens=tokenize(query, vocab), targets=targets,
                    labels=labels, target_instance=int(target),
                    scene_id=name, sample_id=sample_id))
    if not samples:
        raise ContractError(f"no scene directories under {corpus_dir}")
    return samples, vocab


def split_samples(samples: list[SceneSample], eval_fraction: float = 0.2
                  ) -> tuple[list[SceneSample], list[SceneSample]]:
    """Deterministic split by position in sorted scene-id order.

    With the default fraction, every fifth scene (index % 5 == 4) is
    held out; a fraction of 0 keeps everything in the training split.
    """
    if not 0.0 <= eval_fraction < 1.0:
        raise ContractError(f"eval fraction must be in [0, 1), got {eval_fraction}")
    ordered = sorted(samples, key=lambda s: s.sample_id)
    if eval_fraction == 0.0:
        return ordered, []
    period = max(2, round(1.0 / eval_fraction))
    train = [s for i, s in enumerate(ordered) if (i + 1) % period != 0]
    heldout = [s for i, s in enumerate(ordered) if (i + 1) % period == 0]
    return train, heldout
