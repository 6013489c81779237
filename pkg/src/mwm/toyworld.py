"""Deterministic 2D tabletop with two views, ground-truth masks, and experts.

The world is purely kinematic: a gripper moves in the unit square, closes on
an object, carries it, and releases it in a goal zone.  Rendering is analytic
(per-pixel shape predicates), so RGB frames and semantic masks come from the
same geometry and align exactly.  Appearance nuisances — background pattern,
lighting gain, object color swaps — perturb only the RGB pass; the mask pass
never reads them, which is the invariance the rest of the system leans on.

Demonstrations come from a scripted expert and are stored one binary file per
episode (raw u8 RGB, run-length-encoded masks, f64 actions/states) next to a
JSON manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, VerificationError
from .tensorkit import Rng

# -- palette of object colors ----------------------------------------------------

COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta")
COLOR_RGB = np.array([
    [0.85, 0.10, 0.10],
    [0.10, 0.70, 0.15],
    [0.12, 0.25, 0.85],
    [0.90, 0.85, 0.10],
    [0.55, 0.10, 0.70],   # ids 4..7 never appear in demos: reserved for shifts
    [0.95, 0.50, 0.05],
    [0.05, 0.80, 0.80],
    [0.90, 0.10, 0.60],
])
UNSEEN_COLOR_IDS = (4, 5, 6, 7)
GRIPPER_RGB = np.array([0.82, 0.82, 0.85])

N_PATTERNS = 4            # pattern 0 is nominal; 1..3 are held-out textures
UNSEEN_PATTERNS = (1, 2, 3)

VIEW_NAMES = ("third", "wrist")

# -- tasks ------------------------------------------------------------------------

ZONES = {
    "left": (0.0, 0.0, 0.22, 1.0),      # (x0, y0, x1, y1)
    "right": (0.78, 0.0, 1.0, 1.0),
    "top": (0.0, 0.0, 1.0, 0.22),
    "bottom": (0.0, 0.78, 1.0, 1.0),
}

# Every scene contains all four objects; the instruction picks one out.
SCENE_OBJECTS = ((0, "cube"), (1, "disk"), (2, "cube"), (3, "disk"))
OBJECT_SIZE = 0.06        # half-extent for cubes, radius for disks


@dataclass(frozen=True)
class Task:
    name: str
    object_index: int     # into SCENE_OBJECTS
    zone: str

    @property
    def instruction(self) -> str:
        color_id, shape = SCENE_OBJECTS[self.object_index]
        return f"move the {COLOR_NAMES[color_id]} {shape} to the {self.zone} zone"


TASKS = (
    Task("red-cube-left", 0, "left"),
    Task("green-disk-right", 1, "right"),
    Task("blue-cube-top", 2, "top"),
    Task("yellow-disk-bottom", 3, "bottom"),
)

VOCAB = tuple(sorted({word for t in TASKS for word in t.instruction.split()}))
TEXT_LEN = len(TASKS[0].instruction.split())


def resolve_task(task) -> Task:
    """Accept a Task, its name, or its index; anything else is a contract error."""
    if isinstance(task, Task):
        return task
    if isinstance(task, str):
        for t in TASKS:
            if t.name == task:
                return t
        raise ContractError(f"unknown task {task!r}; known: {[t.name for t in TASKS]}")
    if isinstance(task, (int, np.integer)) and 0 <= int(task) < len(TASKS):
        return TASKS[int(task)]
    raise ContractError(f"unknown task {task!r}")


def tokenize(text: str) -> np.ndarray:
    """Whitespace tokens over the closed template vocabulary -> int64 ids."""
    ids = []
    for word in text.split():
        if word not in VOCAB:
            raise ContractError(f"word {word!r} outside the template vocabulary")
        ids.append(VOCAB.index(word))
    return np.array(ids, dtype=np.int64)


# -- nuisances ---------------------------------------------------------------------


@dataclass(frozen=True)
class Nuisance:
    """Appearance perturbation; the nominal value is the all-defaults instance."""

    pattern: int = 0
    gain: float = 1.0
    color_swap: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not 0 <= self.pattern < N_PATTERNS:
            raise ContractError(f"pattern id {self.pattern} outside 0..{N_PATTERNS - 1}")
        if not 0.4 <= self.gain <= 1.6:
            raise ContractError(f"lighting gain {self.gain} outside [0.4, 1.6]")
        for src, dst in self.color_swap:
            if not (0 <= src < len(COLOR_RGB) and 0 <= dst < len(COLOR_RGB)):
                raise ContractError(f"color swap ({src}, {dst}) outside the palette")

    def rendered_color(self, color_id: int) -> int:
        for src, dst in self.color_swap:
            if src == color_id:
                return dst
        return color_id


NOMINAL = Nuisance()


# -- world state --------------------------------------------------------------------


@dataclass
class ObjectState:
    shape: str            # "cube" | "disk" | "tray"
    size: float
    color_id: int
    pos: np.ndarray       # (2,)
    held: bool = False


@dataclass
class WorldState:
    gripper: np.ndarray   # (3,) x, y, open-fraction
    objects: list[ObjectState]
    task: Task
    steps: int = 0


def _in_zone(pos: np.ndarray, zone: str) -> bool:
    x0, y0, x1, y1 = ZONES[zone]
    return bool(x0 <= pos[0] <= x1 and y0 <= pos[1] <= y1)


def zone_anchor(zone: str) -> np.ndarray:
    """A point comfortably inside the zone, used as the expert's drop target."""
    x0, y0, x1, y1 = ZONES[zone]
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2])


# -- rendering ----------------------------------------------------------------------


def _pixel_coords(size: int, center: np.ndarray, zoom: float):
    """World coordinates of pixel centers for a square window around `center`."""
    half = 0.5 / zoom
    axis = center[0] - half + (np.arange(size) + 0.5) / size * 2 * half
    ys = center[1] - half + (np.arange(size) + 0.5) / size * 2 * half
    return np.meshgrid(axis, ys)  # X, Y each (size, size), row-major in y


def _background(x: np.ndarray, y: np.ndarray, pattern: int) -> np.ndarray:
    if pattern == 0:
        rgb = np.empty((*x.shape, 3))
        rgb[:] = (0.45, 0.42, 0.38)
    elif pattern == 1:
        sel = (np.floor(x * 8).astype(int) % 2).astype(bool)
        rgb = np.where(sel[..., None], (0.55, 0.33, 0.22), (0.22, 0.33, 0.55))
    elif pattern == 2:
        sel = ((np.floor(x * 6) + np.floor(y * 6)).astype(int) % 2).astype(bool)
        rgb = np.where(sel[..., None], (0.52, 0.52, 0.18), (0.18, 0.50, 0.48))
    elif pattern == 3:
        ix, iy = np.floor(x * 16), np.floor(y * 16)
        h = np.sin(ix * 12.9898 + iy * 78.233) * 43758.5453
        h = h - np.floor(h)
        rgb = np.stack([0.25 + 0.5 * h, 0.28 + 0.4 * h, 0.24 + 0.3 * h], axis=-1)
    else:
        raise ContractError(f"pattern id {pattern} outside 0..{N_PATTERNS - 1}")
    off_table = (x < 0) | (x > 1) | (y < 0) | (y > 1)
    rgb[off_table] = 0.0
    return rgb


def _object_pixels(x, y, obj: ObjectState) -> np.ndarray:
    dx, dy = x - obj.pos[0], y - obj.pos[1]
    if obj.shape == "cube":
        return (np.abs(dx) <= obj.size) & (np.abs(dy) <= obj.size)
    if obj.shape == "disk":
        return dx * dx + dy * dy <= obj.size * obj.size
    if obj.shape == "tray":
        r = np.maximum(np.abs(dx), np.abs(dy))
        return (r <= obj.size) & (r >= 0.6 * obj.size)
    raise ContractError(f"unknown shape {obj.shape!r}")


def _gripper_pixels(x, y, gripper: np.ndarray) -> np.ndarray:
    gx, gy, opening = gripper
    off = 0.018 + 0.030 * opening
    fingers = (np.abs(np.abs(x - gx) - off) <= 0.010) & (np.abs(y - gy) <= 0.028)
    palm = (np.abs(x - gx) <= off + 0.010) & (np.abs(y - (gy - 0.034)) <= 0.008)
    return fingers | palm


def render(state: WorldState, view: str, nuisance: Nuisance,
           size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """One view -> (RGB float image in [0,1], semantic mask of class ids).

    Classes: 0 background, 1 gripper, 2+i for scene object i.  The mask pass
    never consults the nuisance, so masks are invariant to appearance by
    construction.
    """
    if view == "third":
        x, y = _pixel_coords(size, np.array([0.5, 0.5]), zoom=1.0)
    elif view == "wrist":
        x, y = _pixel_coords(size, state.gripper[:2], zoom=2.0)
    else:
        raise ContractError(f"unknown view {view!r}; expected one of {VIEW_NAMES}")

    rgb = _background(x, y, nuisance.pattern)
    mask = np.zeros((size, size), dtype=np.uint8)
    for i, obj in enumerate(state.objects):
        inside = _object_pixels(x, y, obj)
        rgb[inside] = COLOR_RGB[nuisance.rendered_color(obj.color_id)]
        mask[inside] = 2 + i
    grip = _gripper_pixels(x, y, state.gripper)
    rgb[grip] = GRIPPER_RGB
    mask[grip] = 1
    rgb = np.clip(rgb * nuisance.gain, 0.0, 1.0)
    return rgb, mask


# -- environment --------------------------------------------------------------------


class ToyEnv:
    """Single episode of the tabletop; observations are (view, H, W, 3) stacks."""

    MAX_DELTA = 0.08      # per-axis position step bound
    GRASP_RADIUS = 0.05

    def __init__(self, task, nuisance: Nuisance = NOMINAL, image_size: int = 32,
                 max_steps: int = 60):
        self.task = resolve_task(task)
        self.nuisance = nuisance
        self.image_size = image_size
        self.max_steps = max_steps
        self.state: WorldState | None = None
        self.done = False
        self.success = False
        self.clamp_warnings = 0

    # -- lifecycle -------------------------------------------------------------

    def reset(self, rng: Rng) -> np.ndarray:
        """Rejection-sample a layout: objects a diameter apart, goal out of zone."""
        for _ in range(200):
            pos = rng.uniform((len(SCENE_OBJECTS), 2), low=0.15, high=0.85)
            gaps = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
            np.fill_diagonal(gaps, np.inf)
            if gaps.min() < 2 * OBJECT_SIZE:
                continue
            if _in_zone(pos[self.task.object_index], self.task.zone):
                continue
            break
        else:
            raise ContractError("no valid layout in 200 placement attempts")
        objects = [ObjectState(shape, OBJECT_SIZE, color_id, pos[i].copy())
                   for i, (color_id, shape) in enumerate(SCENE_OBJECTS)]
        gripper = np.concatenate([rng.uniform((2,), low=0.3, high=0.7), [1.0]])
        self.state = WorldState(gripper, objects, self.task)
        self.done = self.success = False
        self.clamp_warnings = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        """Both views, quantized through u8 exactly like stored demonstrations."""
        frames = [render(self.state, v, self.nuisance, self.image_size)[0]
                  for v in VIEW_NAMES]
        return np.round(np.stack(frames) * 255).astype(np.uint8) / 255.0

    def observe_masks(self) -> np.ndarray:
        return np.stack([render(self.state, v, self.nuisance, self.image_size)[1]
                         for v in VIEW_NAMES])

    def proprio(self) -> np.ndarray:
        return self.state.gripper.copy()

    # -- dynamics ---------------------------------------------------------------

    def step(self, action) -> None:
        if self.done:
            raise ContractError("step() after episode end")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (3,):
            raise ContractError(f"action must be (dx, dy, grip); got shape {a.shape}")
        if np.any(np.abs(a[:2]) > self.MAX_DELTA) or abs(a[2]) > 1.0:
            self.clamp_warnings += 1
        move = np.clip(a[:2], -self.MAX_DELTA, self.MAX_DELTA)
        grip = float(np.clip(a[2], -1.0, 1.0))

        st = self.state
        was_open = st.gripper[2] >= 0.5
        st.gripper[:2] = np.clip(st.gripper[:2] + move, 0.0, 1.0)
        # Deadband actuation: the fingers only move on a committed command, so
        # small regression noise on the grip channel cannot flip the gripper.
        if grip <= -0.5:
            st.gripper[2] = 0.0
        elif grip >= 0.5:
            st.gripper[2] = 1.0
        now_open = st.gripper[2] >= 0.5

        for obj in st.objects:
            if obj.held:
                obj.pos = st.gripper[:2].copy()
        if was_open and not now_open:
            dists = [np.linalg.norm(o.pos - st.gripper[:2]) for o in st.objects]
            nearest = int(np.argmin(dists))
            if dists[nearest] <= self.GRASP_RADIUS:
                st.objects[nearest].held = True
        elif now_open and not was_open:
            for obj in st.objects:
                obj.held = False

        st.steps += 1
        goal = st.objects[self.task.object_index]
        if not goal.held and _in_zone(goal.pos, self.task.zone):
            self.done = self.success = True
        elif st.steps >= self.max_steps:
            self.done = True


# -- scripted expert -----------------------------------------------------------------


def expert_action(env: ToyEnv) -> np.ndarray:
    """Four-phase script: approach, grasp, carry, release.

    Moves are exact clipped deltas, so the gripper lands on its targets in
    finitely many steps and the episode always fits the default budget.  Both
    grip triggers fire inside a tolerance rather than at an exact point: the
    behaviour survives small perturbations, and an imitator only has to match
    it to within a pixel.
    """
    st = env.state
    goal = st.objects[env.task.object_index]
    here = st.gripper[:2]
    if not goal.held:
        d = goal.pos - here
        if np.linalg.norm(d) > env.GRASP_RADIUS / 2:
            return np.array([*np.clip(d, -env.MAX_DELTA, env.MAX_DELTA), 0.0])
        return np.array([0.0, 0.0, -1.0])        # near center, open: close to grasp
    d = zone_anchor(env.task.zone) - goal.pos
    if np.linalg.norm(d) > 0.03:
        return np.array([*np.clip(d, -env.MAX_DELTA, env.MAX_DELTA), 0.0])
    return np.array([0.0, 0.0, 1.0])             # near the anchor: release


# -- episode records -----------------------------------------------------------------


@dataclass
class EpisodeRecord:
    """One rollout: per-step observations before each action, plus outcome."""

    task_id: int
    seed: int
    nuisance: Nuisance
    success: bool
    instruction: str
    rgb: np.ndarray       # (T, V, H, W, 3) u8
    masks: np.ndarray     # (T, V, H, W) u8
    actions: np.ndarray   # (T, A) f64
    states: np.ndarray    # (T, S) f64

    def __post_init__(self):
        lengths = {self.rgb.shape[0], self.masks.shape[0],
                   self.actions.shape[0], self.states.shape[0]}
        if len(lengths) != 1:
            raise ContractError(f"per-step blocks disagree on length: {sorted(lengths)}")

    @property
    def length(self) -> int:
        return self.rgb.shape[0]

    def rgb_views(self) -> np.ndarray:
        """(V, T, H, W, 3) float frames in [0, 1]."""
        return self.rgb.transpose(1, 0, 2, 3, 4).astype(np.float64) / 255.0

    def mask_views(self) -> np.ndarray:
        """(V, T, H, W) class-id rasters."""
        return self.masks.transpose(1, 0, 2, 3)

    def text_ids(self) -> np.ndarray:
        return tokenize(self.instruction)


def run_episode(env: ToyEnv, rng: Rng, policy=expert_action, seed_tag: int = 0,
                record: bool = True) -> EpisodeRecord:
    """Roll one episode with a policy of signature env -> action."""
    env.reset(rng)
    rgb, masks, actions, states = [], [], [], []
    while not env.done:
        if record:
            frames = env.observe()
            rgb.append(np.round(frames * 255).astype(np.uint8))
            masks.append(env.observe_masks())
        states.append(env.proprio())
        action = policy(env)
        actions.append(np.asarray(action, dtype=np.float64))
        env.step(action)
    if not record:
        shape = (len(actions), len(VIEW_NAMES), env.image_size, env.image_size)
        rgb = np.zeros((*shape, 3), dtype=np.uint8)
        masks = np.zeros(shape, dtype=np.uint8)
    else:
        rgb, masks = np.stack(rgb), np.stack(masks)
    return EpisodeRecord(TASKS.index(env.task), seed_tag, env.nuisance, env.success,
                         env.task.instruction, rgb, masks,
                         np.stack(actions), np.stack(states))


# -- binary storage ------------------------------------------------------------------

_MAGIC = b"MWEP"
_VERSION = 1


def _rle_encode(flat: np.ndarray) -> list[tuple[int, int]]:
    edges = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [flat.size]])
    return [(int(flat[s]), int(e - s)) for s, e in zip(starts, ends)]


def _rle_decode(runs: list[tuple[int, int]], n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.uint8)
    at = 0
    for value, count in runs:
        out[at:at + count] = value
        at += count
    if at != n:
        raise ContractError(f"mask run lengths sum to {at}, expected {n}")
    return out


def save_episode(path: Path, rec: EpisodeRecord) -> None:
    t, v, h, w, _ = rec.rgb.shape
    a_dim, s_dim = rec.actions.shape[1], rec.states.shape[1]
    instr = rec.instruction.encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(_MAGIC)
        fp.write(struct.pack("<IIQB", _VERSION, rec.task_id, rec.seed, rec.success))
        fp.write(struct.pack("<Id", rec.nuisance.pattern, rec.nuisance.gain))
        fp.write(struct.pack("<I", len(rec.nuisance.color_swap)))
        for src, dst in rec.nuisance.color_swap:
            fp.write(struct.pack("<II", src, dst))
        fp.write(struct.pack("<I", len(instr)) + instr)
        fp.write(struct.pack("<IIIIII", t, v, h, w, a_dim, s_dim))
        for step in range(t):
            fp.write(rec.rgb[step].tobytes())
            for view in range(v):
                runs = _rle_encode(rec.masks[step, view].ravel())
                fp.write(struct.pack("<I", len(runs)))
                for value, count in runs:
                    fp.write(struct.pack("<BI", value, count))
            fp.write(rec.actions[step].astype("<f8").tobytes())
            fp.write(rec.states[step].astype("<f8").tobytes())


def _read(fp, fmt: str):
    size = struct.calcsize(fmt)
    raw = fp.read(size)
    if len(raw) != size:
        raise ContractError("episode file truncated")
    return struct.unpack(fmt, raw)


def load_episode(path: Path) -> EpisodeRecord:
    with open(path, "rb") as fp:
        if fp.read(4) != _MAGIC:
            raise ContractError(f"{path} is not an episode file")
        version, task_id, seed, success = _read(fp, "<IIQB")
        if version != _VERSION:
            raise ContractError(f"episode format version {version}, expected {_VERSION}")
        pattern, gain = _read(fp, "<Id")
        swaps = tuple(_read(fp, "<II") for _ in range(_read(fp, "<I")[0]))
        instr = fp.read(_read(fp, "<I")[0]).decode("utf-8")
        t, v, h, w, a_dim, s_dim = _read(fp, "<IIIIII")
        rgb = np.empty((t, v, h, w, 3), dtype=np.uint8)
        masks = np.empty((t, v, h, w), dtype=np.uint8)
        actions = np.empty((t, a_dim))
        states = np.empty((t, s_dim))
        frame_bytes = v * h * w * 3
        for step in range(t):
            raw = fp.read(frame_bytes)
            if len(raw) != frame_bytes:
                raise ContractError("episode file truncated")
            rgb[step] = np.frombuffer(raw, dtype=np.uint8).reshape(v, h, w, 3)
            for view in range(v):
                runs = [_read(fp, "<BI") for _ in range(_read(fp, "<I")[0])]
                masks[step, view] = _rle_decode(runs, h * w).reshape(h, w)
            actions[step] = _read(fp, f"<{a_dim}d")
            states[step] = _read(fp, f"<{s_dim}d")
    return EpisodeRecord(task_id, seed, Nuisance(pattern, gain, swaps), bool(success),
                         instr, rgb, masks, actions, states)


# -- demonstration datasets -----------------------------------------------------------


def generate_demos(out_dir: Path, count: int = 50, seed: int = 0, image_size: int = 32,
                   max_steps: int = 60, tasks=TASKS, policy=expert_action) -> dict:
    """Collect `count` successful expert episodes per task under nominal appearance.

    Failed attempts are discarded and resampled; a failure rate above 50%
    means the environment and expert disagree, which is a setup defect rather
    than bad luck, so the run aborts.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Rng(seed)
    manifest = {"seed": seed, "image_size": image_size, "max_steps": max_steps,
                "count_per_task": count, "tasks": [t.name for t in tasks],
                "vocab": list(VOCAB), "splits": {"train": []}}
    for task in tasks:
        kept, attempt = 0, 0
        while kept < count:
            if attempt >= 10 and attempt - kept > attempt / 2:
                raise VerificationError(
                    f"expert failed {attempt - kept}/{attempt} attempts on {task.name}")
            rng = root.split(f"demos/{task.name}/{attempt}")
            env = ToyEnv(task, nuisance=NOMINAL, image_size=image_size,
                         max_steps=max_steps)
            rec = run_episode(env, rng, policy=policy, seed_tag=attempt)
            attempt += 1
            if not rec.success:
                continue
            name = f"{task.name}-{rec.seed:04d}.ep"
            save_episode(out_dir / name, rec)
            manifest["splits"]["train"].append(name)
            kept += 1
    with open(out_dir / "manifest.json", "w") as fp:
        json.dump(manifest, fp, indent=1, sort_keys=True)
    return manifest


def load_manifest(demo_dir: Path) -> dict:
    path = Path(demo_dir) / "manifest.json"
    if not path.exists():
        raise ContractError(f"no manifest at {path}")
    with open(path) as fp:
        return json.load(fp)


def load_split(demo_dir: Path, split: str = "train") -> list[EpisodeRecord]:
    manifest = load_manifest(demo_dir)
    if split not in manifest["splits"]:
        raise ContractError(f"split {split!r} not in manifest: {list(manifest['splits'])}")
    return [load_episode(Path(demo_dir) / name) for name in manifest["splits"][split]]
