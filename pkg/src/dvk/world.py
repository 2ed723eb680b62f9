"""Synthetic grid world emitting patch-embedding grids with ground truth.

A world owns a set of unit-norm part prototypes (background, gripper,
handle, and a dictionary of body-part roles) sampled one vector at a
time so that no pair has |cosine| above 0.2.  Objects are templates of
part blocks placed on the grid at a seeded pose; every object exposes
exactly one handle cell.  Rendering a
state produces a PatchGrid: each cell is its part prototype plus
Gaussian appearance noise, re-normalized, with an attention plane set by
role levels (background low, object mid, gripper high) plus clamped
noise.  Frames are deterministic per (world, state).

The agent is a point gripper in [0, 1]^2 taking actions (dx, dy, g); a
grasp (g > 0.5) ends the episode, succeeding iff the gripper sits within
1.5 cell widths of the handle cell center.  The scripted expert walks
toward the handle center with a unit-clamped proportional step plus
seeded jitter and grasps inside 1.0 cell width.
"""

from dataclasses import dataclass, field

import numpy as np

from ._util import rng_for
from .errors import (
    BadConfig,
    DimMismatch,
    DoesNotFit,
    PrototypeSamplingFailed,
)
from .formats import PatchGrid

DEFAULT_SIGMA = 0.2

_PROTO_TRIES = 10_000
_PROTO_MAX_COS = 0.2


@dataclass(frozen=True)
class PartBlock:
    """A rectangular run of cells of one body role, relative to the anchor."""

    role: str
    offset: tuple  # (dr, dc) of the block's top-left
    height: int = 1
    width: int = 1

    def cells(self):
        r0, c0 = self.offset
        for r in range(r0, r0 + self.height):
            for c in range(c0, c0 + self.width):
                yield (r, c)


@dataclass(frozen=True)
class Layout:
    """One arrangement of a template's parts; layouts of a template share
    the same per-role cell counts."""

    blocks: tuple
    handle: tuple  # (dr, dc) of the single handle cell


@dataclass(frozen=True)
class ObjectTemplate:
    name: str
    layouts: tuple
    handle_slide: tuple = (0, 0)  # unit direction the handle cell may jitter along
    slide_range: int = 0

    def role_counts(self, layout: Layout) -> dict:
        counts: dict = {"handle": 1}
        for b in layout.blocks:
            counts[b.role] = counts.get(b.role, 0) + b.height * b.width
        return counts

    def validate(self) -> None:
        if not self.layouts:
            raise BadConfig(f"template {self.name!r} has no layouts")
        base = self.role_counts(self.layouts[0])
        for layout in self.layouts:
            cells = [c for b in layout.blocks for c in b.cells()]
            if layout.handle in cells or len(set(cells)) != len(cells):
                raise BadConfig(f"template {self.name!r} has overlapping cells")
            if self.role_counts(layout) != base:
                raise BadConfig(f"template {self.name!r} layouts disagree on role counts")


def _t(name, layouts, slide=(0, 0), rng=0):
    return ObjectTemplate(name=name, layouts=tuple(layouts), handle_slide=slide, slide_range=rng)


def _mug(name, body_shapes, handle_row):
    layouts = []
    for h, w in body_shapes:
        layouts.append(
            Layout(
                blocks=(PartBlock("body_1", (0, 0), h, w),),
                handle=(handle_row, w),
            )
        )
    return _t(name, layouts, slide=(1, 0), rng=1)


# Intra-class suite: four mug variants differing in body extent.
# Inter-class suite: three training morphologies and seven held-out ones,
# all sharing the single handle prototype.  The training trio collectively
# uses every body role, so demo feature bags contain the full part
# dictionary; held-out templates recombine those roles into new shapes.
# Training templates mount the handle on either end and jitter it along
# the rim, so body-part positions alone never pin the handle down and a
# policy has to follow the handle cue itself.
CATALOG = {
    t.name: t
    for t in [
        _mug("mug_a", [(3, 3)], 1),
        _mug("mug_b", [(3, 4), (4, 3)], 1),
        _mug("mug_c", [(4, 4)], 2),
        _mug("mug_d", [(4, 5), (5, 4)], 2),
        _t(
            "pan",
            [
                Layout(
                    blocks=(
                        PartBlock("body_2", (0, 0), 3, 3),
                        PartBlock("body_3", (0, 3), 3, 1),
                        PartBlock("body_4", (0, 4)),
                        PartBlock("body_5", (1, 4)),
                        PartBlock("body_6", (2, 4)),
                    ),
                    handle=(1, 5),
                ),
                Layout(
                    blocks=(
                        PartBlock("body_2", (0, 0), 3, 3),
                        PartBlock("body_3", (0, 3), 3, 1),
                        PartBlock("body_4", (0, 4)),
                        PartBlock("body_5", (1, 4)),
                        PartBlock("body_6", (2, 4)),
                    ),
                    handle=(1, -1),
                ),
            ],
            slide=(1, 0),
            rng=1,
        ),
        _t(
            "driver",
            [
                Layout(
                    blocks=(
                        PartBlock("body_7", (0, 0), 1, 2),
                        PartBlock("body_8", (0, 2)),
                        PartBlock("body_9", (0, 3), 1, 2),
                        PartBlock("body_10", (0, 5)),
                        PartBlock("body_11", (0, 6)),
                        PartBlock("body_12", (0, 7)),
                    ),
                    handle=(0, 8),
                ),
                Layout(
                    blocks=(
                        PartBlock("body_7", (0, 0), 1, 2),
                        PartBlock("body_8", (0, 2)),
                        PartBlock("body_9", (0, 3), 1, 2),
                        PartBlock("body_10", (0, 5)),
                        PartBlock("body_11", (0, 6)),
                        PartBlock("body_12", (0, 7)),
                    ),
                    handle=(0, -1),
                ),
            ],
            slide=(1, 0),
            rng=1,
        ),
        _t(
            "teapot",
            [
                Layout(
                    blocks=(
                        PartBlock("body_1", (0, 1), 3, 4),
                        PartBlock("body_9", (1, 5)),
                        PartBlock("body_4", (-1, 2)),
                    ),
                    handle=(1, 0),
                )
            ],
        ),
        _t(
            "pot",
            [
                Layout(
                    blocks=(
                        PartBlock("body_2", (1, 0), 2, 5),
                        PartBlock("body_11", (0, 3)),
                        PartBlock("body_3", (0, 4)),
                    ),
                    handle=(0, 1),
                )
            ],
        ),
        _t(
            "hammer",
            [
                Layout(
                    blocks=(
                        PartBlock("body_10", (0, 0), 1, 3),
                        PartBlock("body_7", (1, 1), 2, 1),
                    ),
                    handle=(3, 1),
                )
            ],
        ),
        _t(
            "ladle",
            [
                Layout(
                    blocks=(
                        PartBlock("body_6", (0, 0), 2, 2),
                        PartBlock("body_8", (0, 2), 1, 2),
                    ),
                    handle=(0, 4),
                )
            ],
        ),
        _t(
            "basket",
            [
                Layout(
                    blocks=(
                        PartBlock("body_1", (1, 0), 2, 4),
                        PartBlock("body_12", (0, 0)),
                        PartBlock("body_12", (0, 3)),
                    ),
                    handle=(0, 1),
                )
            ],
        ),
        _t(
            "rattle",
            [
                Layout(
                    blocks=(
                        PartBlock("body_5", (0, 0), 2, 2),
                        PartBlock("body_4", (0, 2)),
                    ),
                    handle=(0, 3),
                )
            ],
        ),
        _t(
            "brush",
            [
                Layout(
                    blocks=(
                        PartBlock("body_3", (0, 0), 2, 3),
                        PartBlock("body_9", (0, 3), 1, 2),
                    ),
                    handle=(0, 5),
                )
            ],
        ),
    ]
}

INTRA_VARIANTS = ("mug_a", "mug_b", "mug_c", "mug_d")
INTER_TRAIN = ("mug_b", "pan", "driver")
INTER_TEST = ("teapot", "pot", "hammer", "ladle", "basket", "rattle", "brush")

for _tpl in CATALOG.values():
    _tpl.validate()


@dataclass
class World:
    """Fixed geometry plus the sampled prototype dictionary."""

    rows: int = 14
    cols: int = 14
    dim: int = 32
    num_body_parts: int = 12
    sigma: float = DEFAULT_SIGMA
    seed: int = 7
    step_size: float = 0.08
    max_steps: int = 30
    grasp_radius: float = 1.5  # in cell widths
    expert_grasp_radius: float = 1.0
    expert_jitter: float = 0.05
    attention_background: float = 0.05
    attention_object: float = 0.6
    attention_gripper: float = 0.8
    prototypes: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if min(self.rows, self.cols, self.dim) < 1:
            raise BadConfig("world dims must be positive")
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise BadConfig(f"sigma={self.sigma}")
        roles = ["background", "gripper", "handle"] + [
            f"body_{i}" for i in range(1, self.num_body_parts + 1)
        ]
        rng = rng_for(self.seed, "prototypes")
        chosen: list[np.ndarray] = []
        for role in roles:
            ok = None
            for _ in range(_PROTO_TRIES):
                v = rng.normal(size=self.dim)
                v /= np.linalg.norm(v)
                if all(abs(float(v @ u)) <= _PROTO_MAX_COS for u in chosen):
                    ok = v
                    break
            if ok is None:
                raise PrototypeSamplingFailed(
                    f"could not sample prototype {role!r} with pairwise |cos| <= "
                    f"{_PROTO_MAX_COS} in {_PROTO_TRIES} tries (dim={self.dim})"
                )
            chosen.append(ok)
            self.prototypes[role] = ok

    def cell_distance(self, a, b) -> float:
        """Euclidean distance between two (u, v) points measured in cell widths."""
        return float(np.hypot((a[0] - b[0]) * self.cols, (a[1] - b[1]) * self.rows))


@dataclass(frozen=True)
class ObjectInstance:
    class_id: str
    cells: dict  # role -> tuple of (row, col); includes "handle" with one cell
    handle_cell: tuple
    rotation: int
    appearance_seed: int

    def occupied(self):
        for role, cells in self.cells.items():
            for rc in cells:
                yield role, rc


def _rotate(cell, k):
    r, c = cell
    for _ in range(k % 4):
        r, c = c, -r
    return (r, c)


def spawn_object(world: World, class_id: str, seed: int) -> ObjectInstance:
    """Instantiate a template at a seeded pose.

    Layout and handle jitter draw first, then the pose is uniform over
    all (rotation, placement) pairs that fit on the grid.
    """
    template = CATALOG.get(class_id)
    if template is None:
        raise BadConfig(f"unknown object class {class_id!r}")
    for role in template.role_counts(template.layouts[0]):
        if role != "handle" and role not in (
            f"body_{i}" for i in range(1, world.num_body_parts + 1)
        ):
            raise BadConfig(f"template {class_id!r} uses unknown role {role!r}")
    rng = rng_for(seed, "spawn", class_id)
    layout = template.layouts[rng.integers(len(template.layouts))]
    body = [(b.role, cell) for b in layout.blocks for cell in b.cells()]
    body_set = {cell for _, cell in body}
    # jitter the handle along the slide axis, avoiding body cells
    dr, dc = template.handle_slide
    deltas = [
        d
        for d in range(-template.slide_range, template.slide_range + 1)
        if (layout.handle[0] + d * dr, layout.handle[1] + d * dc) not in body_set
    ]
    d = deltas[rng.integers(len(deltas))] if deltas else 0
    handle = (layout.handle[0] + d * dr, layout.handle[1] + d * dc)

    placed = [(role, cell) for role, cell in body] + [("handle", handle)]
    poses = []
    for k in range(4):
        cells = [_rotate(cell, k) for _, cell in placed]
        rs = [r for r, _ in cells]
        cs = [c for _, c in cells]
        h = max(rs) - min(rs) + 1
        w = max(cs) - min(cs) + 1
        for r0 in range(world.rows - h + 1):
            for c0 in range(world.cols - w + 1):
                poses.append((k, r0 - min(rs), c0 - min(cs)))
    if not poses:
        raise DoesNotFit(
            f"object {class_id!r} does not fit a {world.rows}x{world.cols} grid"
        )
    k, off_r, off_c = poses[rng.integers(len(poses))]
    final: dict = {}
    for role, cell in placed:
        r, c = _rotate(cell, k)
        final.setdefault(role, []).append((r + off_r, c + off_c))
    cells = {role: tuple(sorted(v)) for role, v in final.items()}
    return ObjectInstance(
        class_id=class_id,
        cells=cells,
        handle_cell=cells["handle"][0],
        rotation=k,
        appearance_seed=int(rng.integers(np.iinfo(np.int64).max)),
    )


def handle_center_uv(world: World, obj: ObjectInstance) -> tuple:
    r, c = obj.handle_cell
    return ((c + 0.5) / world.cols, (r + 0.5) / world.rows)


@dataclass(frozen=True)
class EnvState:
    obj: ObjectInstance
    gripper: tuple  # (u, v)
    t: int = 0
    done: bool = False
    success: bool = False
    grasped: bool = False


def initial_state(world: World, obj: ObjectInstance, seed: int) -> EnvState:
    rng = rng_for(seed, "start")
    u, v = rng.uniform(0.05, 0.95, size=2)
    return EnvState(obj=obj, gripper=(float(u), float(v)))


def gripper_cell(world: World, state: EnvState) -> tuple:
    u, v = state.gripper
    return (
        min(int(v * world.rows), world.rows - 1),
        min(int(u * world.cols), world.cols - 1),
    )


def render(world: World, state: EnvState) -> PatchGrid:
    """Deterministic frame for a state: embeddings + attention plane."""
    rows, cols, dim = world.rows, world.cols, world.dim
    emb = np.tile(world.prototypes["background"], (rows, cols, 1))
    att = np.full((rows, cols), world.attention_background, dtype=np.float64)
    for role, (r, c) in state.obj.occupied():
        proto = world.prototypes["handle" if role == "handle" else role]
        emb[r, c] = proto
        att[r, c] = world.attention_object
    gr, gc = gripper_cell(world, state)
    emb[gr, gc] = world.prototypes["gripper"]  # gripper occludes object cells
    att[gr, gc] = world.attention_gripper
    rng = rng_for(state.obj.appearance_seed, "render", state.t)
    if world.sigma > 0:
        emb = emb + rng.normal(0.0, world.sigma, size=emb.shape)
        att = att + rng.normal(0.0, world.sigma / 4.0, size=att.shape)
    emb /= np.linalg.norm(emb, axis=2)[:, :, None]
    att = np.clip(att, 0.0, 1.0)
    return PatchGrid(
        embeddings=emb.astype(np.float32),
        attention=att.astype(np.float32),
        frame_id=f"t{state.t:03d}",
    )


def step(world: World, state: EnvState, action) -> EnvState:
    """Apply one clamped action; grasping or the step budget ends the episode."""
    if state.done:
        raise BadConfig("cannot step a finished episode")
    a = np.asarray(action, dtype=np.float64).ravel()
    if a.shape != (3,):
        raise DimMismatch(f"action must have 3 components, got shape {a.shape}")
    if not np.isfinite(a).all():
        a = np.nan_to_num(a, nan=0.0, posinf=1.0, neginf=-1.0)
    dx, dy, g = np.clip(a, -1.0, 1.0)
    u = float(np.clip(state.gripper[0] + world.step_size * dx, 0.0, 1.0))
    v = float(np.clip(state.gripper[1] + world.step_size * dy, 0.0, 1.0))
    t = state.t + 1
    if g > 0.5:
        dist = world.cell_distance((u, v), handle_center_uv(world, state.obj))
        return EnvState(
            obj=state.obj,
            gripper=(u, v),
            t=t,
            done=True,
            success=dist < world.grasp_radius,
            grasped=True,
        )
    return EnvState(
        obj=state.obj,
        gripper=(u, v),
        t=t,
        done=t >= world.max_steps,
        success=False,
        grasped=False,
    )


def expert_action(world: World, state: EnvState) -> np.ndarray:
    """Proportional step toward the handle center, jittered, grasp when close."""
    tu, tv = handle_center_uv(world, state.obj)
    du = tu - state.gripper[0]
    dv = tv - state.gripper[1]
    rng = rng_for(state.obj.appearance_seed, "expert", state.t)
    jx, jy = rng.normal(0.0, world.expert_jitter, size=2)
    dx = float(np.clip(du / world.step_size + jx, -1.0, 1.0))
    dy = float(np.clip(dv / world.step_size + jy, -1.0, 1.0))
    close = world.cell_distance(state.gripper, (tu, tv)) < world.expert_grasp_radius
    return np.array([dx, dy, 1.0 if close else 0.0], dtype=np.float64)


@dataclass
class RolloutResult:
    success: bool
    num_steps: int
    steps: list = field(default_factory=list)  # (PatchGrid, proprio, action) if recorded


def rollout(
    world: World,
    obj: ObjectInstance,
    seed: int,
    agent=None,
    record: bool = False,
) -> RolloutResult:
    """Run one episode; agent is a callable (grid, proprio) -> action, or
    None for the scripted expert (which acts on ground-truth state)."""
    state = initial_state(world, obj, seed)
    records = []
    while not state.done:
        proprio = np.array(
            [state.gripper[0], state.gripper[1], 1.0 if state.grasped else 0.0],
            dtype=np.float64,
        )
        if agent is None:
            grid = render(world, state) if record else None
            action = expert_action(world, state)
        else:
            grid = render(world, state)
            action = agent(grid, proprio)
        if record:
            records.append((grid, proprio, np.asarray(action, dtype=np.float64)))
        state = step(world, state, action)
    return RolloutResult(success=state.success, num_steps=state.t, steps=records)
