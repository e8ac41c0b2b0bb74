"""Multi-view QA dataset handling: manifests, c-tags, splits, synthesis.

A dataset is one JSON manifest plus PPM images. Each frame carries six
camera views and a list of question/answer pairs. Object references inside
text use the c-tag form ``<id,CAM,x,y>`` with pixel coordinates measured
from the top-left corner.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import SeededRng
from .errors import ConfigError, DataError
from .vision import Image, save_ppm

CAMERA_NAMES = ("CAM_FRONT", "CAM_FRONT_LEFT", "CAM_FRONT_RIGHT",
                "CAM_BACK", "CAM_BACK_LEFT", "CAM_BACK_RIGHT")
FRONT_CAMERAS = CAMERA_NAMES[:3]
CATEGORIES = ("perception", "prediction", "planning", "behavior")

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 0.9, 0.0),
}
# Black background: an empty patch projects to exactly zero, so object
# color and position are the only content the pooled embedding carries.
_BACKGROUND = 0.0


@dataclass(frozen=True)
class QASample:
    scene_id: str
    frame_id: str
    views: dict  # camera name -> image path
    question: str
    answer: str
    category: str
    qa_index: int = 0

    @property
    def sid(self) -> str:
        """Stable sample id used in prediction/reference files."""
        return f"{self.scene_id}/{self.frame_id}/{self.qa_index}"


@dataclass(frozen=True)
class CTag:
    """Textual object reference: id, camera, pixel center."""

    object_id: str
    camera: str
    x_pos: float
    y_pos: float

    def __post_init__(self):
        if self.camera not in CAMERA_NAMES:
            raise DataError(f"unknown camera {self.camera!r} in c-tag")
        if self.x_pos < 0 or self.y_pos < 0:
            raise DataError("c-tag coordinates must be non-negative")

    def serialize(self) -> str:
        return f"<{self.object_id},{self.camera},{self.x_pos:.1f},{self.y_pos:.1f}>"


_CTAG_RE = re.compile(
    r"<(c\d+), ?(" + "|".join(CAMERA_NAMES) + r"), ?(\d+(?:\.\d+)?|\.\d+), ?(\d+(?:\.\d+)?|\.\d+)>")


def parse_ctags(text: str) -> list[CTag]:
    """Extract every well-formed c-tag, in order of appearance.

    Angle-bracket text that does not match the grammar is simply ignored.
    """
    return [CTag(m.group(1), m.group(2), float(m.group(3)), float(m.group(4)))
            for m in _CTAG_RE.finditer(text)]


@dataclass(frozen=True)
class SceneSplit:
    train: frozenset
    val: frozenset
    test: frozenset
    seed: int

    def bucket_of(self, scene_id: str) -> str:
        for name in ("train", "val", "test"):
            if scene_id in getattr(self, name):
                return name
        raise DataError(f"scene {scene_id!r} not covered by the split")


def split_scenes(samples: list[QASample], fractions=(0.90, 0.05, 0.05), seed: int = 0) -> SceneSplit:
    """Scene-level split with seeded shuffle and largest-remainder rounding.

    Every frame of a scene lands in exactly one bucket; fixed seed gives a
    fixed assignment.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    scenes: list[str] = []
    seen = set()
    for s in samples:
        if s.scene_id not in seen:
            seen.add(s.scene_id)
            scenes.append(s.scene_id)
    n = len(scenes)
    nonzero = sum(1 for f in fractions if f > 0)
    if n < nonzero:
        raise DataError(f"{n} scenes cannot fill {nonzero} non-empty buckets")
    order = [scenes[i] for i in SeededRng(seed).permutation(n)]
    exact = [n * f for f in fractions]
    sizes = [math.floor(e) for e in exact]
    remainders = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1
    cut1, cut2 = sizes[0], sizes[0] + sizes[1]
    return SceneSplit(train=frozenset(order[:cut1]), val=frozenset(order[cut1:cut2]),
                      test=frozenset(order[cut2:]), seed=seed)


def samples_in(samples: list[QASample], split: SceneSplit, bucket: str) -> list[QASample]:
    ids = getattr(split, bucket)
    return [s for s in samples if s.scene_id in ids]


# -- manifest I/O ---------------------------------------------------------


def load_dataset(manifest_path, strict: bool = True) -> tuple[list[QASample], list[str]]:
    """Parse and validate a manifest.

    Returns (samples, problem descriptions). In strict mode the first
    problem raises DataError instead; in lenient mode bad records are
    skipped and reported.
    """
    path = Path(manifest_path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "scenes" not in doc:
        raise DataError("manifest must be an object with a 'scenes' list")
    root = path.parent
    samples: list[QASample] = []
    problems: list[str] = []

    def bad(msg: str) -> None:
        if strict:
            raise DataError(msg)
        problems.append(msg)

    for scene in doc["scenes"]:
        scene_id = scene.get("scene_id")
        if not scene_id:
            bad("scene without scene_id")
            continue
        for frame in scene.get("frames", []):
            frame_id = frame.get("frame_id")
            where = f"scene {scene_id}, frame {frame_id}"
            if not frame_id:
                bad(f"scene {scene_id}: frame without frame_id")
                continue
            views = frame.get("views", {})
            unknown = set(views) - set(CAMERA_NAMES)
            missing = [c for c in CAMERA_NAMES if c not in views]
            if unknown:
                bad(f"{where}: unknown camera name(s) {sorted(unknown)}")
                continue
            if missing:
                bad(f"{where}: missing view(s) {missing}")
                continue
            resolved = {cam: str(root / rel) for cam, rel in views.items()}
            for qa_index, qa in enumerate(frame.get("qas", [])):
                q, a = qa.get("question", ""), qa.get("answer", "")
                cat = qa.get("category", "")
                if not q or not a:
                    bad(f"{where}: QA {qa_index} with empty question or answer")
                    continue
                if cat not in CATEGORIES:
                    bad(f"{where}: QA {qa_index} has unknown category {cat!r}")
                    continue
                samples.append(QASample(scene_id=scene_id, frame_id=frame_id, views=resolved,
                                        question=q, answer=a, category=cat, qa_index=qa_index))
    return samples, problems


# -- synthetic dataset -----------------------------------------------------
#
# Frames are 64x64 with a 4x4 grid of 16x16 cells. Camera k may only place
# objects in its own band, cells {2k, 2k+1}: the pooled view embedding
# discards camera identity, so camera membership must be recoverable from
# patch position for camera-conditioned questions to stay answerable. An
# object fills its camera's whole band (a patch-aligned 2-cell rectangle),
# which keeps the color signal wide enough to survive pooling.

_CELLS_PER_CAMERA = 2


def _band_cells(camera: str) -> tuple[int, int]:
    k = CAMERA_NAMES.index(camera)
    return (_CELLS_PER_CAMERA * k, _CELLS_PER_CAMERA * k + 1)


def _band_center(camera: str, patch: int, grid_w: int) -> tuple[float, float]:
    c0, c1 = _band_cells(camera)
    (r0, col0), (r1, col1) = divmod(c0, grid_w), divmod(c1, grid_w)
    x0, x1 = col0 * patch, (col1 + 1) * patch
    y0, y1 = r0 * patch, (r1 + 1) * patch
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


@dataclass(frozen=True)
class _Rect:
    camera: str
    color: str


def _render_views(rects: list[_Rect], image_size: int, patch: int) -> dict[str, Image]:
    views = {}
    grid_w = image_size // patch
    for cam in CAMERA_NAMES:
        px = np.full((3, image_size, image_size), _BACKGROUND)
        for r in rects:
            if r.camera != cam:
                continue
            for cell in _band_cells(cam):
                row, col = divmod(cell, grid_w)
                y0, x0 = row * patch, col * patch
                for ch, val in enumerate(COLOR_RGB[r.color]):
                    px[ch, y0:y0 + patch, x0:x0 + patch] = val
        views[cam] = Image(px)
    return views


def _frame_qas(rects: list[_Rect], probe_cam: str, patch: int, grid_w: int) -> list[dict]:
    lead = rects[0]
    cx, cy = _band_center(lead.camera, patch, grid_w)
    ctag = CTag("c1", lead.camera, cx, cy)
    occupied = {r.camera for r in rects}
    safe = "no" if probe_cam in occupied else "yes"
    braking = any(c in FRONT_CAMERAS for c in occupied)
    return [
        {"question": f"What color is the object in {lead.camera}?",
         "answer": lead.color, "category": "perception"},
        {"question": f"Where will the object in {lead.camera} be?",
         "answer": ctag.serialize(), "category": "prediction"},
        {"question": f"Is it safe to move toward {probe_cam}?",
         "answer": safe, "category": "planning"},
        {"question": "What is the ego vehicle doing?",
         "answer": "braking" if braking else "moving forward", "category": "behavior"},
    ]


def gen_synthetic(n_scenes: int, frames_per_scene: int, seed: int, out_dir,
                  image_size: int = 64, patch: int = 16) -> Path:
    """Write a deterministic synthetic dataset; returns the manifest path.

    Every answer is computable from the generation parameters and
    consistent with the rendered pixels. Four QAs per frame, one per
    category.
    """
    if n_scenes < 1 or frames_per_scene < 1:
        raise ConfigError("need at least one scene and one frame per scene")
    if image_size % patch:
        raise ConfigError(f"image size {image_size} not divisible by patch {patch}")
    grid_w = image_size // patch
    if grid_w * grid_w < _CELLS_PER_CAMERA * len(CAMERA_NAMES):
        raise ConfigError("grid too small to give every camera its own cells")
    rng = SeededRng(seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    # Lead objects rotate through the cameras (seed-offset), and each camera
    # keeps one fixed color per dataset: color and center questions then pool
    # their gradient signal across scenes instead of conflicting, which is
    # what lets the short two-stage schedule overfit. Object counts, probe
    # cameras and secondary objects stay fully random, so occupancy-driven
    # questions (safety, ego behaviour) can only be answered from pixels.
    colors = sorted(COLOR_RGB)
    cam_off, color_off = rng.integers(0, 6), rng.integers(0, len(colors))
    scenes_doc = []
    for si in range(n_scenes):
        scene_id = f"scene_{si:04d}"
        frames_doc = []
        for fi in range(frames_per_scene):
            frame_id = f"frame_{fi:04d}"
            n_rect = rng.integers(1, 4)
            lead_idx = (si + fi + cam_off) % len(CAMERA_NAMES)
            lead_cam = CAMERA_NAMES[lead_idx]
            lead_color = colors[(lead_idx + color_off) % len(colors)]
            rects = [_Rect(camera=lead_cam, color=lead_color)]
            others = [c for c in CAMERA_NAMES if c != lead_cam]
            extra_order = [others[i] for i in rng.permutation(len(others))]
            for j in range(n_rect - 1):
                rects.append(_Rect(camera=extra_order[j], color=rng.choice(colors)))
            probe_cam = rng.choice(CAMERA_NAMES)
            views = _render_views(rects, image_size, patch)
            rel_views = {}
            img_dir = out / "images" / scene_id / frame_id
            img_dir.mkdir(parents=True, exist_ok=True)
            for cam, img in views.items():
                rel = f"images/{scene_id}/{frame_id}/{cam}.ppm"
                save_ppm(out / rel, img)
                rel_views[cam] = rel
            frames_doc.append({"frame_id": frame_id, "views": rel_views,
                               "qas": _frame_qas(rects, probe_cam, patch, grid_w)})
        scenes_doc.append({"scene_id": scene_id, "frames": frames_doc})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"scenes": scenes_doc}, indent=2) + "\n")
    return manifest


def dominant_rect_color(img: Image) -> str | None:
    """Most frequent non-background rectangle color actually present in the
    pixels; None when the view is empty. Used to audit synthetic answers."""
    best, best_count = None, 0
    px = img.pixels
    for name, rgb in COLOR_RGB.items():
        mask = np.all(np.abs(px - np.asarray(rgb)[:, None, None]) < 1e-3, axis=0)
        count = int(mask.sum())
        if count > best_count:
            best, best_count = name, count
    return best
