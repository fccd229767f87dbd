"""Experiment orchestration: seeded runs, deterministic evaluation, OOD and
ablation suites, result tables and learning-curve aggregation.

Every trained run leaves a manifest.json beside its checkpoints so that any
emitted number is traceable to the metrics/checkpoint files that produced
it. Suites keep an append-only JSONL manifest and skip completed cells on
resume.
"""

from __future__ import annotations

import fcntl
import glob as globmod
import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import ppo
from .policy import PolicyNet, collate, deterministic
from .disentangle import build_repr_input
from .simworld import (InitStateSet, PickPlaceEnv, add_distractors,
                       harvest_pick_terminals, ood_recolor)

# (cubes, plates) settings keyed by total object count
OBJECT_GRID = {3: (2, 1), 5: (3, 2), 7: (4, 3), 9: (5, 4)}

EVAL_SEED_BASE = 9_000_000  # shared across all methods for protocol fairness


def data_root(default="runs"):
    return os.environ.get("DOCIR_LAB_DATA", default)


# ---------------------------------------------------------------------------
# single runs

def train_run(cfg: ppo.TrainConfig):
    """Train one seeded run and write a manifest beside its checkpoints."""
    summary = ppo.train(cfg)
    manifest = {
        "task": cfg.task, "variant": cfg.variant,
        "n_cubes": cfg.n_cubes, "n_plates": cfg.n_plates,
        "repr": cfg.repr, "seed": cfg.seed, "resolution": cfg.resolution,
        "total_steps": cfg.total_steps, "init_set_path": cfg.init_set_path,
        "deterministic": cfg.deterministic,
        "summary": summary,
    }
    with open(os.path.join(cfg.out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return summary


def _load_run(checkpoint_path):
    """Rebuild (net, mode, scene config, train cfg) from a checkpoint's manifest."""
    run_dir = os.path.dirname(os.path.abspath(checkpoint_path))
    with open(os.path.join(run_dir, "manifest.json")) as f:
        man = json.load(f)
    cfg = ppo.TrainConfig(task=man["task"], variant=man["variant"],
                          n_cubes=man["n_cubes"], n_plates=man["n_plates"],
                          repr=man["repr"], seed=man["seed"],
                          resolution=man["resolution"],
                          init_set_path=man.get("init_set_path"),
                          out_dir=run_dir)
    scene, mode, spec = ppo.build_mode_and_spec(cfg)
    net = PolicyNet(spec, seed=cfg.seed)
    net.load(checkpoint_path)
    return net, mode, scene, cfg


def evaluate(checkpoint_path, episodes=100, ood=None, distractor_count=3,
             seed_base=EVAL_SEED_BASE):
    """Deterministic success rate of a checkpoint on a fixed seed sequence.

    ood: None | "recolor" | "distractors".
    """
    net, mode, scene, cfg = _load_run(checkpoint_path)
    if ood == "recolor":
        scene = ood_recolor(scene)
    elif ood == "distractors":
        scene = add_distractors(scene, distractor_count)
    elif ood is not None:
        raise ValueError(f"unknown ood setting {ood!r}")
    init_set = InitStateSet.load(cfg.init_set_path) if cfg.task == "place" else None

    def factory(seed):
        return PickPlaceEnv(scene, task=cfg.task, seed=seed, init_set=init_set)

    rate, _ = ppo.evaluate_policy(net, mode, factory, episodes, seed_base=seed_base)
    return rate


def ood_suite(checkpoint_path, episodes=100, distractor_count=3):
    """In-distribution, unseen-color and added-distractor evaluations, all on
    the same evaluation seed sequence."""
    return {
        "in_dist": evaluate(checkpoint_path, episodes),
        "recolor": evaluate(checkpoint_path, episodes, ood="recolor"),
        "distractor": evaluate(checkpoint_path, episodes, ood="distractors",
                               distractor_count=distractor_count),
    }


def harvest(checkpoint_path, n=200, out_path=None, seed=0):
    """Harvest successful pick terminal states with a deterministic policy."""
    net, mode, scene, cfg = _load_run(checkpoint_path)
    if cfg.task != "pick":
        raise ValueError("init states are harvested from a pick policy")

    def policy_fn(obs):
        dist, _ = net.dist_and_value(collate([build_repr_input(obs, mode)]))
        return deterministic(dist)[0]

    init_set = harvest_pick_terminals(policy_fn, scene, n=n, seed=seed)
    out_path = out_path or os.path.join(os.path.dirname(checkpoint_path),
                                        "init_set.json")
    init_set.save(out_path)
    return out_path


# ---------------------------------------------------------------------------
# suites

@dataclass
class ResultCell:
    task: str
    variant: str
    n_cubes: int
    n_plates: int
    repr: str
    seed_rates: dict            # seed -> success rate
    partial: bool               # fewer seeds than requested

    @property
    def mean_success(self):
        return float(np.mean(list(self.seed_rates.values())))


def _run_key(cfg: ppo.TrainConfig):
    return (f"{cfg.task}/{cfg.variant}/{cfg.n_cubes}-{cfg.n_plates}/"
            f"{cfg.repr}/seed{cfg.seed}")


def _append_manifest(path, record):
    with open(path, "a") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        f.write(json.dumps(record) + "\n")
        fcntl.flock(f, fcntl.LOCK_UN)


def _read_manifest(path):
    done = {}
    if os.path.exists(path):
        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                done[rec["key"]] = rec
    return done


def run_suite(runs, suite_dir, eval_episodes=100, seeds_per_cell=3):
    """Execute a matrix of TrainConfigs, resumably, and emit a results CSV.

    Completed runs (present in the suite manifest) are skipped. Cells with
    fewer than ``seeds_per_cell`` finished seeds are flagged partial and
    never silently averaged into full results.
    """
    os.makedirs(suite_dir, exist_ok=True)
    manifest_path = os.path.join(suite_dir, "manifest.jsonl")
    done = _read_manifest(manifest_path)

    for cfg in runs:
        key = _run_key(cfg)
        if key in done:
            continue
        cfg = replace(cfg, out_dir=os.path.join(suite_dir, key.replace("/", "_")))
        train_run(cfg)
        rate = evaluate(os.path.join(cfg.out_dir, "ckpt_best.bin"),
                        episodes=eval_episodes)
        record = {"key": key, "task": cfg.task, "variant": cfg.variant,
                  "n_cubes": cfg.n_cubes, "n_plates": cfg.n_plates,
                  "repr": cfg.repr, "seed": cfg.seed, "success_rate": rate,
                  "run_dir": cfg.out_dir}
        _append_manifest(manifest_path, record)
        done[key] = record

    cells = {}
    for rec in done.values():
        ck = (rec["task"], rec["variant"], rec["n_cubes"], rec["n_plates"], rec["repr"])
        cells.setdefault(ck, {})[rec["seed"]] = rec["success_rate"]
    result = [ResultCell(task=t, variant=v, n_cubes=nc, n_plates=np_, repr=r,
                         seed_rates=rates, partial=len(rates) < seeds_per_cell)
              for (t, v, nc, np_, r), rates in sorted(cells.items())]

    csv_path = os.path.join(suite_dir, "results.csv")
    with open(csv_path, "w") as f:
        f.write("task,variant,cubes,plates,repr,mean_success,n_seeds,partial,per_seed\n")
        for c in result:
            per_seed = ";".join(f"{s}:{r:.3f}" for s, r in sorted(c.seed_rates.items()))
            f.write(f"{c.task},{c.variant},{c.n_cubes},{c.n_plates},{c.repr},"
                    f"{c.mean_success:.4f},{len(c.seed_rates)},{c.partial},{per_seed}\n")
    return result, csv_path


def preset_runs(preset, steps=None, seeds=(0, 1, 2), init_set_path=None):
    """Desk-scale suite presets. The full-scale budget is opt-in via steps."""
    runs = []
    if preset == "paper-table1-desk":
        for task in ("pick", "place"):
            budget = steps or (1_000_000 if task == "pick" else 1_500_000)
            for variant in ("fixed_target", "varying_target"):
                for total in (3, 5, 7, 9):
                    nc, npl = OBJECT_GRID[total]
                    for repr_ in ("docir", "ocr", "flat"):
                        for seed in seeds:
                            runs.append(ppo.TrainConfig(
                                task=task, variant=variant, n_cubes=nc,
                                n_plates=npl, repr=repr_, seed=seed,
                                total_steps=budget, resolution=48,
                                init_set_path=init_set_path if task == "place" else None))
        if init_set_path is None:
            runs = [r for r in runs if r.task == "pick"]
    elif preset == "ablations":
        nc, npl = OBJECT_GRID[5]
        for repr_ in ("docir", "ablation-a", "ablation-b", "ablation-c"):
            for seed in seeds:
                runs.append(ppo.TrainConfig(
                    task="pick", variant="varying_target", n_cubes=nc,
                    n_plates=npl, repr=repr_, seed=seed,
                    total_steps=steps or 1_000_000, resolution=48))
    elif preset == "ood":
        nc, npl = OBJECT_GRID[5]
        for seed in seeds:
            runs.append(ppo.TrainConfig(
                task="pick", variant="varying_target", n_cubes=nc, n_plates=npl,
                repr="docir", seed=seed, total_steps=steps or 1_000_000,
                resolution=48))
    else:
        raise ValueError(f"unknown preset {preset!r}")
    return runs


# ---------------------------------------------------------------------------
# learning curves

def rolling_mean(series, window):
    """Full-window rolling mean; a window larger than the series collapses to
    a single averaged point."""
    series = np.asarray(series, dtype=np.float64)
    w = min(window, len(series))
    if w == 0:
        return np.array([])
    return np.convolve(series, np.ones(w) / w, mode="valid")


def _forward_fill(series):
    out = np.array(series, dtype=np.float64)
    last = 0.0
    for i, v in enumerate(out):
        if np.isnan(v):
            out[i] = last
        else:
            last = v
    return out


def curves(metrics_paths, out_prefix, window=50, field="success_rate"):
    """Aggregate per-seed rolling means into per-method mean curves with a
    min/max band; emit CSV of the plotted series plus a dependency-free SVG."""
    if isinstance(metrics_paths, str):
        metrics_paths = sorted(globmod.glob(metrics_paths))
    if not metrics_paths:
        raise ValueError("no metrics files matched")
    by_label = {}
    for path in metrics_paths:
        run_dir = os.path.dirname(os.path.abspath(path))
        label = os.path.basename(run_dir)
        man_path = os.path.join(run_dir, "manifest.json")
        if os.path.exists(man_path):
            with open(man_path) as f:
                man = json.load(f)
            label = f"{man['repr']}"
        steps, vals = [], []
        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                if rec.get("kind") == "update":
                    steps.append(rec["step"])
                    v = rec.get(field)
                    vals.append(float("nan") if v is None else float(v))
        if vals:
            by_label.setdefault(label, []).append(
                (np.array(steps), rolling_mean(_forward_fill(vals), window)))

    table = {}
    for label, seeds in by_label.items():
        n = min(len(v) for _, v in seeds)
        stacked = np.stack([v[:n] for _, v in seeds])
        steps = seeds[0][0][len(seeds[0][0]) - len(seeds[0][1]):][:n]
        table[label] = {"steps": steps, "mean": stacked.mean(axis=0),
                        "lo": stacked.min(axis=0), "hi": stacked.max(axis=0)}

    csv_path = out_prefix + ".csv"
    with open(csv_path, "w") as f:
        f.write("label,step,mean,min,max\n")
        for label, s in table.items():
            for i in range(len(s["mean"])):
                f.write(f"{label},{int(s['steps'][i])},{s['mean'][i]:.6f},"
                        f"{s['lo'][i]:.6f},{s['hi'][i]:.6f}\n")
    svg_path = out_prefix + ".svg"
    _write_svg(table, svg_path)
    return csv_path, svg_path


_SVG_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _write_svg(table, path, width=640, height=400):
    ml, mr, mt, mb = 60, 20, 20, 45
    pw, ph = width - ml - mr, height - mt - mb
    xs = [s["steps"] for s in table.values() if len(s["steps"])]
    if not xs:
        xmax = 1.0
    else:
        xmax = max(float(x[-1]) for x in xs) or 1.0
    ymax = max(1e-9, max(float(np.max(s["hi"])) for s in table.values())) if table else 1.0
    ymax = max(ymax, 1.0)

    def px(x):
        return ml + pw * (x / xmax)

    def py(y):
        return mt + ph * (1.0 - y / ymax)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{ml - 8}" y="{py(frac * ymax) + 4}" font-size="11" '
                     f'text-anchor="end">{frac * ymax:.2f}</text>')
        parts.append(f'<text x="{px(frac * xmax)}" y="{mt + ph + 16}" font-size="11" '
                     f'text-anchor="middle">{int(frac * xmax)}</text>')
    for i, (label, s) in enumerate(sorted(table.items())):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        if len(s["mean"]) == 0:
            continue
        band = " ".join(f"{px(float(x)):.1f},{py(float(y)):.1f}"
                        for x, y in zip(s["steps"], s["hi"]))
        band += " " + " ".join(f"{px(float(x)):.1f},{py(float(y)):.1f}"
                               for x, y in zip(s["steps"][::-1], s["lo"][::-1]))
        parts.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{px(float(x)):.1f},{py(float(y)):.1f}"
                        for x, y in zip(s["steps"], s["mean"]))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{ml + pw - 8}" y="{mt + 16 + 14 * i}" font-size="12" '
                     f'text-anchor="end" fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
