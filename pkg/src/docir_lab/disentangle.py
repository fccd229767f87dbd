"""Semantic grouping and representation inputs.

The disentanglement splits a frame into three masked stacks (robot,
objects of interest, obstacles). The same machinery also produces the two
baselines (flat raw image, per-object OCR slots) and the three two-group
ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import Frame, MaskedStack, apply_mask, binary_mask

REPR_KINDS = ("docir", "ocr", "flat", "ablation_a", "ablation_b", "ablation_c")


@dataclass(frozen=True)
class SceneRegistry:
    """Which nonzero instance IDs are robot links vs scene objects."""
    robot_ids: frozenset
    object_ids: frozenset

    def all_ids(self):
        return self.robot_ids | self.object_ids


@dataclass(frozen=True)
class GroupSpec:
    robot_ids: frozenset
    object_ids: frozenset  # objects of interest, task-dependent
    obstacle_ids: frozenset


@dataclass(frozen=True)
class ReprMode:
    kind: str
    slot_count: int = 0       # ocr only
    id_embed_dim: int = 0     # ocr/flat only

    def __post_init__(self):
        if self.kind not in REPR_KINDS + ("proprio",):
            raise ValueError(f"unknown repr kind {self.kind!r}")
        if self.kind in ("docir", "ablation_a", "ablation_b", "ablation_c") \
                and self.id_embed_dim != 0:
            raise ValueError("mask-grouped modes carry no id embedding")

    @property
    def stack_channels(self):
        return 3 if self.kind == "flat" else 4

    def stacks_per_view(self):
        return {"docir": 3, "ocr": self.slot_count, "flat": 1,
                "ablation_a": 2, "ablation_b": 2, "ablation_c": 2,
                "proprio": 0}[self.kind]


def parse_repr_flag(flag: str, n_objects: int = 0) -> ReprMode:
    """Map a CLI value like 'ablation-a' to a ReprMode with sane defaults."""
    kind = flag.replace("-", "_")
    if kind == "ocr":
        return ReprMode("ocr", slot_count=n_objects + 1, id_embed_dim=8)
    if kind == "flat":
        return ReprMode("flat", id_embed_dim=8)
    return ReprMode(kind)


def make_group_spec(registry: SceneRegistry, target_ids) -> GroupSpec:
    target_ids = frozenset(target_ids)
    if target_ids & registry.robot_ids:
        raise ValueError("target ids overlap robot ids")
    unknown = target_ids - registry.object_ids
    if unknown:
        raise ValueError(f"unknown target ids {sorted(unknown)}")
    return GroupSpec(robot_ids=frozenset(registry.robot_ids),
                     object_ids=target_ids,
                     obstacle_ids=frozenset(registry.object_ids) - target_ids)


def docir_stacks(frame: Frame, spec: GroupSpec):
    """Three 4-channel stacks in canonical order (robot, objects, obstacles)."""
    return [apply_mask(frame.rgb, binary_mask(frame.ids, g))
            for g in (spec.robot_ids, spec.object_ids, spec.obstacle_ids)]


def ablation_stacks(frame: Frame, spec: GroupSpec, variant: str):
    """Two-group variants: A=(robot+objects, obstacles), B=(robot+obstacles,
    objects), C=(objects+obstacles, robot)."""
    groups = {
        "A": (spec.robot_ids | spec.object_ids, spec.obstacle_ids),
        "B": (spec.robot_ids | spec.obstacle_ids, spec.object_ids),
        "C": (spec.object_ids | spec.obstacle_ids, spec.robot_ids),
    }[variant.upper()]
    return [apply_mask(frame.rgb, binary_mask(frame.ids, g)) for g in groups]


def ocr_slots(frame: Frame, registry: SceneRegistry, slot_count: int):
    """Slot 0: robot. Slots 1..N: one stack per object, ascending instance ID.
    Remaining slots are all-white zero-mask padding."""
    objects = sorted(registry.object_ids)
    if slot_count < len(objects) + 1:
        raise ValueError(f"{len(objects)} objects overflow {slot_count} slots")
    stacks = [apply_mask(frame.rgb, binary_mask(frame.ids, registry.robot_ids))]
    for oid in objects:
        stacks.append(apply_mask(frame.rgb, binary_mask(frame.ids, {oid})))
    pad = np.zeros(frame.ids.shape, dtype=np.uint8)
    while len(stacks) < slot_count:
        stacks.append(apply_mask(frame.rgb, pad))
    return stacks


def flat_obs(frame: Frame) -> np.ndarray:
    """Raw RGB, channel-major (3, H, W)."""
    return np.ascontiguousarray(np.moveaxis(frame.rgb, -1, 0))


@dataclass
class ReprInput:
    """Network-ready inputs for one observation: per-view stacks plus the
    target id (consumed by the embedding path for ocr/flat, ignored by docir)."""
    views: dict = field(default_factory=dict)  # view -> (S, C, H, W) array
    proprio: np.ndarray = None
    target_id: int = 0


def build_repr_input(obs, mode: ReprMode) -> ReprInput:
    """Turn a simulator observation into the tensors a policy consumes.

    ``obs`` carries frames per view, the scene registry, the episode target
    id, and the proprioceptive vector.
    """
    out = ReprInput(proprio=np.asarray(obs.proprio, dtype=np.float64),
                    target_id=int(obs.target_id))
    if mode.kind == "proprio":
        return out
    for view, frame in obs.frames.items():
        if mode.kind == "flat":
            stacks = flat_obs(frame)[None]
        else:
            if mode.kind == "ocr":
                ms = ocr_slots(frame, obs.registry, mode.slot_count)
            else:
                spec = make_group_spec(obs.registry, {obs.target_id})
                if mode.kind == "docir":
                    ms = docir_stacks(frame, spec)
                else:
                    ms = ablation_stacks(frame, spec, mode.kind[-1])
            stacks = np.stack([m.channels for m in ms])
        out.views[view] = stacks.astype(np.float64)
    return out
