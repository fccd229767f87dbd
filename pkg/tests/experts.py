"""Scripted controllers used by tests: a vision-based pick expert (reads
only the observation, like a policy would) and a state-reading place
expert for exercising place environments."""

import numpy as np

from docir_lab.simworld import (CUBE_HALF, STEP_DELTA, Action)

TRAVEL_Z = 0.12
GRASP_Z = 0.063  # just above a table-level cube top (0.06), inside grasp reach


def _centroid(ids, target_id, res):
    m = ids == target_id
    if not m.any():
        return None
    rows, cols = np.nonzero(m)
    return ((cols.mean() + 0.5) / res, (rows.mean() + 0.5) / res)


def pick_expert(obs):
    """Locate the target cube in the base ID raster, hover, descend, grasp, lift."""
    g = obs.proprio[:3]
    grasped = obs.proprio[10] > 0.5
    if grasped:
        return Action(arm=np.array([0.0, 0.0, 1.0]), gripper=1.0)
    ids = obs.frames["base"].ids
    res = ids.shape[0]
    loc = _centroid(ids, obs.target_id, res)
    if loc is None:
        return Action(arm=np.array([0.0, 0.0, 1.0]), gripper=-1.0)
    dx, dy = loc[0] - g[0], loc[1] - g[1]
    if np.hypot(dx, dy) > 0.015:
        arm = np.array([dx / STEP_DELTA, dy / STEP_DELTA,
                        (TRAVEL_Z - g[2]) / STEP_DELTA])
        return Action(arm=np.clip(arm, -1, 1), gripper=-1.0)
    if g[2] > GRASP_Z + 1e-9:
        arm = np.array([dx / STEP_DELTA, dy / STEP_DELTA,
                        (GRASP_Z - g[2]) / STEP_DELTA])
        return Action(arm=np.clip(arm, -1, 1), gripper=-1.0)
    return Action(arm=np.zeros(3), gripper=1.0)


def make_place_expert(env):
    """State-reading controller for place episodes on ``env``."""

    def act(obs):
        state = env.state
        g = state.gripper
        target = state.objects[state.target_id]
        cube = state.objects[state.carried_id]
        if state.attached is None:
            return Action(arm=np.zeros(3), gripper=-1.0)
        dx, dy = target.pos[0] - cube.pos[0], target.pos[1] - cube.pos[1]
        # keep the carried cube's bottom safely above the target's top
        safe_z = target.top + 0.02 - (cube.pos[2] - g[2])
        if np.hypot(dx, dy) > 0.015:
            arm = np.array([dx / STEP_DELTA, dy / STEP_DELTA,
                            (max(safe_z, TRAVEL_Z) - g[2]) / STEP_DELTA])
            return Action(arm=np.clip(arm, -1, 1), gripper=1.0)
        if g[2] > safe_z + 1e-9:
            arm = np.array([dx / STEP_DELTA, dy / STEP_DELTA,
                            (safe_z - g[2]) / STEP_DELTA])
            return Action(arm=np.clip(arm, -1, 1), gripper=1.0)
        return Action(arm=np.zeros(3), gripper=-1.0)

    return act
