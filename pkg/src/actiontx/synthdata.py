"""Deterministic synthetic clips whose labels need spatiotemporal context.

A scene holds "actors" (upright rectangles with a white nose marker showing
where they face), "walkers" (actors that leave the frame before the keyframe)
and small static "objects". The first three classes can be read off an actor's
own tube; the last three depend on other entities, sometimes at other times.
Labels are a pure function of the scene geometry.
"""
import asyncio
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import framing
from .errors import SceneError
from .evaluation import Annotation, read_annotations, write_annotations


logger = logging.getLogger(__name__)

LOCAL_CLASSES = ("spinning", "moving", "flashing")
CONTEXT_CLASSES = ("facing_actor", "near_object", "watching_departed")
CLASS_NAMES = LOCAL_CLASSES + CONTEXT_CLASSES
LOCAL_CLASS_IDS = tuple(range(len(LOCAL_CLASSES)))
CONTEXT_CLASS_IDS = tuple(range(len(LOCAL_CLASSES), len(CLASS_NAMES)))

SPIN_THRESHOLD = 0.2
MOVE_THRESHOLD = 6.0
FACING_TOLERANCE = math.radians(30)
NEAR_OBJECT_GAP = 3.0
OBJECT_SIDE = 4.0
MIN_ACTOR_GAP = 2.0
MAX_PLACEMENT_ATTEMPTS = 200
INTENT_COUNTS = (0, 1, 1, 2)

NOSE_COLOR = (255, 255, 255)
OBJECT_COLOR = (230, 200, 40)
ACTOR_PALETTE = (
    (200, 60, 60), (60, 180, 80), (70, 90, 220), (170, 70, 190),
    (60, 180, 190), (220, 130, 50), (140, 140, 140),
)

CLIP_MAGIC = b"ATXV"
CLIP_VERSION = 1

CLIP_DIR = "clips"
ANNOTATIONS_FILE = "annotations.csv"
MANIFEST_FILE = "manifest.jsonl"
SUMMARY_FILE = "class_summary.json"


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: int = 64
    clip_length: int = 8
    actors: Tuple[int, int] = (2, 4)
    objects: Tuple[int, int] = (1, 3)
    actor_width: Tuple[int, int] = (8, 11)
    jitter: float = 0.5
    class_names: Tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if self.clip_length < 2:
            raise SceneError(f"Clips need at least 2 frames, got {self.clip_length}")
        if self.image_size < 16:
            raise SceneError(f"Frames must be at least 16 pixels, got {self.image_size}")
        if not 1 <= self.actors[0] <= self.actors[1]:
            raise SceneError(f"Bad actor count range {self.actors}")
        if not 0 <= self.objects[0] <= self.objects[1]:
            raise SceneError(f"Bad object count range {self.objects}")
        if not 1 <= self.actor_width[0] <= self.actor_width[1]:
            raise SceneError(f"Bad actor width range {self.actor_width}")

    @property
    def key_index(self) -> int:
        return self.clip_length // 2


def rect(cx, cy, width, height) -> np.ndarray:
    return np.array([cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2])


def rect_gap(a, b) -> float:
    """Separation of two rectangles along the more separated axis; 0 if they touch."""
    dx = max(0.0, b[0] - a[2], a[0] - b[2])
    dy = max(0.0, b[1] - a[3], a[1] - b[3])
    return float(max(dx, dy))


def is_visible(box, image_size) -> bool:
    return bool(box[2] > 0 and box[0] < image_size and box[3] > 0 and box[1] < image_size)


def angle_difference(a: float, b: float) -> float:
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


def is_facing(origin, angle, target) -> bool:
    bearing = math.atan2(target[1] - origin[1], target[0] - origin[0])
    return angle_difference(angle, bearing) <= FACING_TOLERANCE


@dataclass
class ActorTrack:
    key_center: Tuple[float, float]
    velocity: Tuple[float, float]
    jitter: np.ndarray
    key_angle: float
    angular_velocity: float
    width: float
    height: float
    color: Tuple[int, int, int]
    flash: bool = False

    def center(self, t: int, key: int) -> np.ndarray:
        return (
            np.asarray(self.key_center) + np.asarray(self.velocity) * (t - key)
            + self.jitter[t]
        )

    def angle(self, t: int, key: int) -> float:
        return self.key_angle + self.angular_velocity * (t - key)

    def box(self, t: int, key: int) -> np.ndarray:
        cx, cy = self.center(t, key)
        return rect(cx, cy, self.width, self.height)

    def to_dict(self):
        data = asdict(self)
        data["jitter"] = np.asarray(self.jitter).tolist()
        return data

    @classmethod
    def from_dict(cls, data) -> "ActorTrack":
        data = dict(data)
        data["jitter"] = np.asarray(data["jitter"], dtype=np.float64)
        data["key_center"] = tuple(data["key_center"])
        data["velocity"] = tuple(data["velocity"])
        data["color"] = tuple(data["color"])
        return cls(**data)


@dataclass
class SceneObject:
    box: Tuple[float, float, float, float]
    color: Tuple[int, int, int] = OBJECT_COLOR


@dataclass
class Scene:
    image_size: int
    clip_length: int
    background: int
    actors: List[ActorTrack] = field(default_factory=list)
    walkers: List[ActorTrack] = field(default_factory=list)
    objects: List[SceneObject] = field(default_factory=list)

    @property
    def key_index(self) -> int:
        return self.clip_length // 2

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "clip_length": self.clip_length,
            "background": self.background,
            "actors": [a.to_dict() for a in self.actors],
            "walkers": [w.to_dict() for w in self.walkers],
            "objects": [{"box": list(o.box), "color": list(o.color)} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, data) -> "Scene":
        return cls(
            data["image_size"], data["clip_length"], data["background"],
            [ActorTrack.from_dict(a) for a in data["actors"]],
            [ActorTrack.from_dict(w) for w in data["walkers"]],
            [SceneObject(tuple(o["box"]), tuple(o["color"])) for o in data["objects"]],
        )


@dataclass
class ClipSample:
    clip_id: str
    frames: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    scene: Optional[Scene] = None

    def annotations(self) -> List[Annotation]:
        return [
            Annotation(
                self.clip_id, person, tuple(float(v) for v in box),
                tuple(int(c) for c in np.flatnonzero(labels)),
            )
            for person, (box, labels) in enumerate(zip(self.boxes, self.labels))
        ]


def clip_name(index: int) -> str:
    return f"clip{index:05d}"


def gt_boxes(scene: Scene) -> np.ndarray:
    key = scene.key_index
    boxes = np.array([actor.box(key, key) for actor in scene.actors]).reshape(-1, 4)
    return np.clip(boxes, 0, scene.image_size)


def labels_from_scene(scene: Scene) -> np.ndarray:
    key = scene.key_index
    last = scene.clip_length - 1
    size = scene.image_size
    labels = np.zeros((len(scene.actors), len(CLASS_NAMES)), dtype=np.uint8)
    departed = [
        walker for walker in scene.walkers
        if is_visible(walker.box(0, key), size) and not is_visible(walker.box(key, key), size)
    ]
    for index, actor in enumerate(scene.actors):
        row = labels[index]
        row[0] = abs(actor.angular_velocity) >= SPIN_THRESHOLD
        travelled = np.linalg.norm(actor.center(last, key) - actor.center(0, key))
        row[1] = travelled >= MOVE_THRESHOLD
        row[2] = actor.flash

        here, heading = actor.center(key, key), actor.angle(key, key)
        row[3] = any(
            is_facing(here, heading, other.center(key, key))
            for j, other in enumerate(scene.actors)
            if j != index and is_visible(other.box(key, key), size)
        )
        key_box = actor.box(key, key)
        row[4] = any(rect_gap(key_box, obj.box) <= NEAR_OBJECT_GAP for obj in scene.objects)
        start, start_heading = actor.center(0, key), actor.angle(0, key)
        row[5] = any(is_facing(start, start_heading, w.center(0, key)) for w in departed)
    return labels


class SceneBuilder:
    """Draws one scene from `rng`: places actors, picks per-actor label
    intents, and realises each intent geometrically.
    """

    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.spec = spec
        self.rng = rng
        self.size = spec.image_size
        self.key = spec.key_index

    def color(self):
        return ACTOR_PALETTE[int(self.rng.integers(len(ACTOR_PALETTE)))]

    def place_actors(self, count):
        placed = []
        for _ in range(count):
            width = float(self.rng.integers(self.spec.actor_width[0], self.spec.actor_width[1] + 1))
            height = 2 * width
            for _ in range(MAX_PLACEMENT_ATTEMPTS):
                cx = self.rng.uniform(width / 2, self.size - width / 2)
                cy = self.rng.uniform(height / 2, self.size - height / 2)
                box = rect(cx, cy, width, height)
                if all(rect_gap(box, rect(*c, w, h)) >= MIN_ACTOR_GAP for c, w, h in placed):
                    placed.append(((cx, cy), width, height))
                    break
            else:
                raise SceneError(
                    f"Cannot place {count} actors in a {self.size}x{self.size} frame"
                )
        return placed

    def intents(self, names):
        count = int(self.rng.choice(INTENT_COUNTS))
        return set(self.rng.choice(names, size=count, replace=False).tolist())

    def motion(self, intents):
        length = self.spec.clip_length
        if "spinning" in intents:
            omega = float(self.rng.choice([-1.0, 1.0]) * self.rng.uniform(0.3, 0.6))
        else:
            omega = float(self.rng.uniform(-0.08, 0.08))
        unit = MOVE_THRESHOLD / (length - 1)
        if "moving" in intents:
            speed = self.rng.uniform(1.4 * unit, 2.0 * unit)
        else:
            speed = self.rng.uniform(0.0, 0.3 * unit)
        direction = self.rng.uniform(0, 2 * math.pi)
        velocity = (float(speed * math.cos(direction)), float(speed * math.sin(direction)))
        jitter = self.rng.uniform(-self.spec.jitter, self.spec.jitter, size=(length, 2))
        jitter[self.key] = 0.0
        return omega, velocity, jitter

    def walker_towards(self, actor: ActorTrack) -> Optional[ActorTrack]:
        """A walker in `actor`'s frame-0 line of sight that is gone by the keyframe."""
        heading = actor.angle(0, self.key)
        direction = np.array([math.cos(heading), math.sin(heading)])
        origin = actor.center(0, self.key)
        width = float(self.rng.integers(self.spec.actor_width[0], self.spec.actor_width[1] + 1))
        height = 2 * width
        for distance in (self.rng.uniform(14, 22), 12.0, 10.0, 8.0):
            start = origin + direction * distance
            if 0 < start[0] < self.size and 0 < start[1] < self.size:
                break
        else:
            return None

        required = []
        for axis, half in ((0, width / 2), (1, height / 2)):
            component = direction[axis] * self.key
            if component > 1e-6:
                required.append((self.size + half - start[axis]) / component)
            elif component < -1e-6:
                required.append((start[axis] + half) / -component)
        speed = min(required) * 1.05 + 0.5
        return ActorTrack(
            key_center=tuple(float(v) for v in start + direction * speed * self.key),
            velocity=tuple(float(v) for v in direction * speed),
            jitter=np.zeros((self.spec.clip_length, 2)),
            key_angle=float(heading),
            angular_velocity=0.0,
            width=width,
            height=height,
            color=self.color(),
        )

    def object_next_to(self, actor: ActorTrack, actors, objects) -> Optional[SceneObject]:
        box = actor.box(self.key, self.key)
        for side in self.rng.permutation(4):
            gap = self.rng.uniform(0.5, 2.0)
            if side in (0, 1):
                y = self.rng.uniform(box[1], box[3] - OBJECT_SIDE)
                x = box[2] + gap if side == 0 else box[0] - gap - OBJECT_SIDE
            else:
                x = self.rng.uniform(box[0], box[2] - OBJECT_SIDE)
                y = box[3] + gap if side == 2 else box[1] - gap - OBJECT_SIDE
            candidate = (float(x), float(y), float(x + OBJECT_SIDE), float(y + OBJECT_SIDE))
            if candidate[0] < 0 or candidate[1] < 0 or candidate[2] > self.size \
                    or candidate[3] > self.size:
                continue
            others = [a.box(self.key, self.key) for a in actors if a is not actor]
            if any(rect_gap(candidate, other) < 1.0 for other in others):
                continue
            if any(rect_gap(candidate, obj.box) < 1.0 for obj in objects):
                continue
            return SceneObject(candidate)
        return None

    def free_object(self, actors, objects) -> Optional[SceneObject]:
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            x = self.rng.uniform(0, self.size - OBJECT_SIDE)
            y = self.rng.uniform(0, self.size - OBJECT_SIDE)
            candidate = (float(x), float(y), float(x + OBJECT_SIDE), float(y + OBJECT_SIDE))
            clear_of_actors = all(
                rect_gap(candidate, a.box(self.key, self.key)) > 2 * NEAR_OBJECT_GAP
                for a in actors
            )
            if clear_of_actors and all(rect_gap(candidate, o.box) >= 1.0 for o in objects):
                return SceneObject(candidate)
        return None

    def balance_flashing(self, scene: Scene):
        labels = labels_from_scene(scene)
        surplus = int(labels[:, LOCAL_CLASS_IDS].sum()) - int(labels[:, CONTEXT_CLASS_IDS].sum())
        for actor in scene.actors:
            if surplus > 0 and actor.flash:
                actor.flash = False
                surplus -= 1
            elif surplus < 0 and not actor.flash:
                actor.flash = True
                surplus += 1

    def build(self) -> Scene:
        spec = self.spec
        actor_count = int(self.rng.integers(spec.actors[0], spec.actors[1] + 1))
        object_count = int(self.rng.integers(spec.objects[0], spec.objects[1] + 1))
        scene = Scene(self.size, spec.clip_length, int(self.rng.integers(16, 48)))

        placements = self.place_actors(actor_count)
        intents = [
            (self.intents(LOCAL_CLASSES), self.intents(CONTEXT_CLASSES)) for _ in placements
        ]
        for (center, width, height), (local, _) in zip(placements, intents):
            omega, velocity, jitter = self.motion(local)
            scene.actors.append(ActorTrack(
                key_center=(float(center[0]), float(center[1])),
                velocity=velocity,
                jitter=jitter,
                key_angle=float(self.rng.uniform(0, 2 * math.pi)),
                angular_velocity=omega,
                width=width,
                height=height,
                color=self.color(),
                flash="flashing" in local,
            ))

        for index, (actor, (_, context)) in enumerate(zip(scene.actors, intents)):
            if "facing_actor" in context and len(scene.actors) > 1:
                others = [j for j in range(len(scene.actors)) if j != index]
                target = scene.actors[others[int(self.rng.integers(len(others)))]]
                dx, dy = np.asarray(target.key_center) - np.asarray(actor.key_center)
                actor.key_angle = float(math.atan2(dy, dx))
            if "watching_departed" in context:
                walker = self.walker_towards(actor)
                if walker is None:
                    self.logger.debug("dropped watching_departed intent of actor %d", index)
                else:
                    scene.walkers.append(walker)
            if "near_object" in context:
                obj = self.object_next_to(actor, scene.actors, scene.objects)
                if obj is None:
                    self.logger.debug("dropped near_object intent of actor %d", index)
                else:
                    scene.objects.append(obj)

        while len(scene.objects) < object_count:
            obj = self.free_object(scene.actors, scene.objects)
            if obj is None:
                break
            scene.objects.append(obj)

        self.balance_flashing(scene)
        return scene


def _fill(frame: np.ndarray, box, color):
    size_y, size_x = frame.shape[:2]
    x0 = min(max(math.ceil(box[0] - 0.5), 0), size_x)
    x1 = min(max(math.ceil(box[2] - 0.5), 0), size_x)
    y0 = min(max(math.ceil(box[1] - 0.5), 0), size_y)
    y1 = min(max(math.ceil(box[3] - 0.5), 0), size_y)
    frame[y0:y1, x0:x1] = color


def render_scene(scene: Scene) -> np.ndarray:
    """Rasterise every frame, ``(T, S, S, 3)`` uint8, without anti-aliasing."""
    size, key = scene.image_size, scene.key_index
    frames = np.full((scene.clip_length, size, size, 3), scene.background, dtype=np.uint8)
    for t in range(scene.clip_length):
        frame = frames[t]
        for obj in scene.objects:
            _fill(frame, obj.box, obj.color)
        for track in scene.walkers + scene.actors:
            color = track.color
            if track.flash and t % 2:
                color = tuple(c // 3 for c in color)
            _fill(frame, track.box(t, key), color)
            heading = track.angle(t, key)
            reach = min(track.width, track.height) / 2 - 2.5
            nose = track.center(t, key) + reach * np.array([math.cos(heading), math.sin(heading)])
            _fill(frame, rect(nose[0], nose[1], 3, 3), NOSE_COLOR)
    return frames


def generate_clip(spec: SceneSpec, index: int) -> ClipSample:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, index])))
    scene = SceneBuilder(spec, rng).build()
    return ClipSample(
        clip_name(index), render_scene(scene), gt_boxes(scene), labels_from_scene(scene), scene
    )


def write_clip(stream, frames: np.ndarray):
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    length, height, width, _ = frames.shape
    framing.write_header(stream, CLIP_MAGIC, CLIP_VERSION, "III", length, height, width)
    stream.write(frames.tobytes())


def read_clip(stream) -> np.ndarray:
    version, length, height, width = framing.read_header(stream, CLIP_MAGIC, "III")
    if version != CLIP_VERSION:
        raise SceneError(f"Unsupported clip format version {version}")
    raw = framing.read_exactly(stream, length * height * width * 3)
    return np.frombuffer(raw, dtype=np.uint8).reshape(length, height, width, 3).copy()


def encode_clip(frames: np.ndarray) -> bytes:
    stream = io.BytesIO()
    write_clip(stream, frames)
    return stream.getvalue()


def load_clip(path) -> np.ndarray:
    with open(path, "rb") as stream:
        return read_clip(stream)


@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    sha256: str
    scene: dict


@dataclass
class DatasetManifest:
    root: Path
    spec: SceneSpec
    entries: List[ManifestEntry]

    def __len__(self):
        return len(self.entries)

    @property
    def digest(self) -> str:
        return hashlib.sha256((self.root / MANIFEST_FILE).read_bytes()).hexdigest()


def class_summary(samples: Sequence[ClipSample], spec: SceneSpec):
    labels = np.concatenate(
        [s.labels for s in samples] or [np.zeros((0, len(CLASS_NAMES)))]
    ).reshape(-1, len(CLASS_NAMES))
    counts = labels.sum(axis=0).astype(int)
    return {
        "spec": asdict(spec),
        "clips": len(samples),
        "persons": int(len(labels)),
        "background_persons": int((labels.sum(axis=1) == 0).sum()),
        "counts": {name: int(n) for name, n in zip(CLASS_NAMES, counts)},
        "local": int(counts[list(LOCAL_CLASS_IDS)].sum()),
        "context": int(counts[list(CONTEXT_CLASS_IDS)].sum()),
    }


def write_dataset(spec: SceneSpec, samples: Sequence[ClipSample], root) -> DatasetManifest:
    root = Path(root)
    (root / CLIP_DIR).mkdir(parents=True, exist_ok=True)
    entries, annotations = [], []
    for sample in samples:
        relative = f"{CLIP_DIR}/{sample.clip_id}.atxv"
        payload = encode_clip(sample.frames)
        (root / relative).write_bytes(payload)
        entries.append(ManifestEntry(
            sample.clip_id, relative, hashlib.sha256(payload).hexdigest(),
            sample.scene.to_dict() if sample.scene is not None else {},
        ))
        annotations.extend(sample.annotations())

    write_annotations(root / ANNOTATIONS_FILE, annotations)
    with open(root / MANIFEST_FILE, "w", encoding="utf-8") as stream:
        for entry in entries:
            stream.write(json.dumps(asdict(entry), sort_keys=True) + "\n")
    summary = class_summary(samples, spec)
    (root / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d clips to %s (%s)", len(entries), root, summary["counts"])
    return DatasetManifest(root, spec, entries)


def generate_dataset(spec: SceneSpec, count: int, root) -> DatasetManifest:
    if count < 1:
        raise SceneError(f"A dataset needs at least one clip, got {count}")
    samples = [generate_clip(spec, index) for index in range(count)]
    return write_dataset(spec, samples, root)


async def generate_dataset_async(spec: SceneSpec, count: int, root, executor=None
                                 ) -> DatasetManifest:
    """Same bytes as :func:`generate_dataset`, with clips rendered in `executor`."""
    if count < 1:
        raise SceneError(f"A dataset needs at least one clip, got {count}")
    loop = asyncio.get_running_loop()
    samples = await asyncio.gather(*(
        loop.run_in_executor(executor, generate_clip, spec, index) for index in range(count)
    ))
    return await loop.run_in_executor(executor, write_dataset, spec, list(samples), root)


def spec_from_dict(data) -> SceneSpec:
    data = dict(data)
    for key in ("actors", "objects", "actor_width", "class_names"):
        data[key] = tuple(data[key])
    return SceneSpec(**data)


def load_dataset(root) -> List[ClipSample]:
    root = Path(root)
    summary = json.loads((root / SUMMARY_FILE).read_text())
    num_classes = len(summary["spec"]["class_names"])
    by_clip = {}
    for record in read_annotations(root / ANNOTATIONS_FILE):
        by_clip.setdefault(record.clip_id, []).append(record)

    samples = []
    with open(root / MANIFEST_FILE, encoding="utf-8") as stream:
        for line in stream:
            if not line.strip():
                continue
            entry = json.loads(line)
            records = sorted(by_clip.get(entry["clip_id"], []), key=lambda r: r.person_id)
            labels = np.zeros((len(records), num_classes), dtype=np.uint8)
            for row, record in enumerate(records):
                labels[row, list(record.labels)] = 1
            samples.append(ClipSample(
                entry["clip_id"],
                load_clip(root / entry["path"]),
                np.array([r.box for r in records], dtype=np.float64).reshape(-1, 4),
                labels,
                Scene.from_dict(entry["scene"]) if entry["scene"] else None,
            ))
    logger.info("loaded %d clips from %s", len(samples), root)
    return samples
