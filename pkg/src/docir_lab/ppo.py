"""Proximal policy optimization: rollout collection, generalized advantage
estimation and the clipped-surrogate update, plus the training loop that
alternates them and streams JSON-lines metrics."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .autodiff import Tensor
from .disentangle import ReprMode, build_repr_input, parse_repr_flag
from .policy import NetSpec, PolicyNet, collate
from .simworld import (InitStateSet, Observation, PickPlaceEnv, SceneConfig)


@dataclass
class PPOHypers:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    rollout_len: int = 512      # T, per env
    n_envs: int = 8             # N
    grad_clip: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0 and self.clip_eps > 0.0):
            raise ValueError("invalid PPO hyperparameters")


def gae(rewards, values, dones, bootstrap, gamma, lam):
    """delta_t = r_t + g*v_{t+1}*(1-d_t) - v_t; A_t = delta_t + g*l*(1-d_t)*A_{t+1}.

    All inputs are 1-D sequences of equal length; ``bootstrap`` stands in
    for v_T at the rollout cut. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal length")
    t_len = len(rewards)
    adv = np.zeros(t_len)
    last = 0.0
    next_v = bootstrap
    for t in range(t_len - 1, -1, -1):
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterm - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
        next_v = values[t]
    return adv, adv + values


@dataclass
class RolloutBatch:
    """N*T transitions in time-major order (index = t * N + n)."""
    obs: list                      # stored Observations (compact frames)
    arm: np.ndarray                # (NT, 3) pre-clamp sampled actions
    grip: np.ndarray               # (NT,)
    logp_old: np.ndarray           # (NT,)
    rewards: np.ndarray            # (T, N)
    values: np.ndarray             # (T, N)
    dones: np.ndarray              # (T, N)
    bootstrap: np.ndarray          # (N,)
    advantages: np.ndarray = None  # (NT,)
    returns: np.ndarray = None     # (NT,)

    def compute_gae(self, gamma, lam):
        t_len, n = self.rewards.shape
        adv = np.zeros((t_len, n))
        ret = np.zeros((t_len, n))
        for i in range(n):
            adv[:, i], ret[:, i] = gae(self.rewards[:, i], self.values[:, i],
                                       self.dones[:, i], self.bootstrap[i],
                                       gamma, lam)
        self.advantages = adv.reshape(-1)
        self.returns = ret.reshape(-1)


def _compact(obs: Observation) -> Observation:
    """Shrink an observation for rollout storage (frames to float32/int16)."""
    if obs.frames is None:
        return obs
    frames = {}
    for view, fr in obs.frames.items():
        frames[view] = type(fr)(fr.rgb.astype(np.float32), fr.ids.astype(np.int16), fr.view)
    return Observation(frames=frames, proprio=obs.proprio,
                       registry=obs.registry, target_id=obs.target_id)


class RolloutCollector:
    """Owns N env instances and keeps them mid-episode between rollouts."""

    def __init__(self, envs, mode: ReprMode):
        self.envs = envs
        self.mode = mode
        # observations are compacted at receipt so that acting and the later
        # minibatch forward passes see bit-identical inputs
        self.obs = [_compact(env.reset()[1]) for env in envs]
        self.total_steps = 0
        self._ep_return = np.zeros(len(envs))

    def collect(self, net: PolicyNet, t_len: int, rng):
        n = len(self.envs)
        obs_store, arms, grips, logps = [], [], [], []
        rewards = np.zeros((t_len, n))
        values = np.zeros((t_len, n))
        dones = np.zeros((t_len, n))
        ep_returns, ep_successes = [], []

        for t in range(t_len):
            inputs = [build_repr_input(o, self.mode) for o in self.obs]
            dist, value = net.dist_and_value(collate(inputs))
            actions, logp = pol.sample(dist, rng)
            for i, env in enumerate(self.envs):
                obs_store.append(self.obs[i])
                _, nxt_obs, rb, terminated, success = env.step(actions[i])
                rewards[t, i] = rb.total
                dones[t, i] = 1.0 if terminated else 0.0
                self._ep_return[i] += rb.total
                if terminated:
                    ep_returns.append(self._ep_return[i])
                    ep_successes.append(1.0 if success else 0.0)
                    self._ep_return[i] = 0.0
                    _, nxt_obs = env.reset()
                self.obs[i] = _compact(nxt_obs)
            values[t] = value
            arms.append(np.stack([a.arm for a in actions]))
            grips.append(np.array([a.gripper for a in actions]))
            logps.append(logp)

        inputs = [build_repr_input(o, self.mode) for o in self.obs]
        _, bootstrap = net.dist_and_value(collate(inputs))
        self.total_steps += n * t_len
        batch = RolloutBatch(obs=obs_store,
                             arm=np.concatenate(arms),
                             grip=np.concatenate(grips),
                             logp_old=np.concatenate(logps),
                             rewards=rewards, values=values, dones=dones,
                             bootstrap=bootstrap)
        stats = {"episodes": len(ep_returns),
                 "mean_return": float(np.mean(ep_returns)) if ep_returns else float("nan"),
                 "success_rate": float(np.mean(ep_successes)) if ep_successes else float("nan")}
        return batch, stats


@dataclass
class LossReport:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def update(batch: RolloutBatch, net: PolicyNet, optimizer: ad.Adam,
           hypers: PPOHypers, mode: ReprMode, rng) -> LossReport:
    """Clipped-surrogate update: epochs x minibatches passes with reshuffling
    each epoch, one optimizer step per minibatch."""
    if batch.advantages is None:
        batch.compute_gae(hypers.gamma, hypers.lam)
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    nt = len(batch.obs)
    reports = []

    for _ in range(hypers.epochs):
        perm = rng.permutation(nt)
        for idx in np.array_split(perm, hypers.minibatches):
            inputs = [build_repr_input(batch.obs[j], mode) for j in idx]
            mean_t, log_std_t, logit_t, value_t = net.forward(collate(inputs))
            logp_new = pol.log_prob_t(mean_t, log_std_t, logit_t,
                                      batch.arm[idx], batch.grip[idx])
            ratio = ad.exp(ad.sub(logp_new, batch.logp_old[idx]))
            a_mb = adv[idx]
            surr = ad.minimum(ad.mul(ratio, a_mb),
                              ad.mul(ad.clip(ratio, 1.0 - hypers.clip_eps,
                                             1.0 + hypers.clip_eps), a_mb))
            policy_loss = ad.mul(ad.tmean(surr), -1.0)
            value_loss = ad.tmean(ad.square(ad.sub(value_t, batch.returns[idx])))
            ent = pol.entropy_t(log_std_t, logit_t)
            loss = ad.add(ad.add(policy_loss, ad.mul(value_loss, hypers.value_coef)),
                          ad.mul(ent, -hypers.entropy_coef))
            if not np.isfinite(loss.data):
                _dump_diagnostics(batch, idx, reports)
                raise RuntimeError("non-finite PPO loss; diagnostics dumped")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            r = ratio.data
            reports.append(LossReport(
                policy_loss=float(policy_loss.data),
                value_loss=float(value_loss.data),
                entropy=float(ent.data),
                clip_fraction=float(np.mean(np.abs(r - 1.0) > hypers.clip_eps)),
                approx_kl=float(np.mean(r - 1.0 - np.log(np.maximum(r, 1e-30)))),
            ))
    return LossReport(*[float(np.mean([getattr(r, f) for r in reports]))
                        for f in ("policy_loss", "value_loss", "entropy",
                                  "clip_fraction", "approx_kl")])


def _dump_diagnostics(batch, idx, reports):
    dump = {
        "minibatch_indices": np.asarray(idx).tolist(),
        "logp_old": batch.logp_old[np.asarray(idx)].tolist(),
        "advantage_stats": {"mean": float(batch.advantages.mean()),
                            "std": float(batch.advantages.std()),
                            "max": float(batch.advantages.max())},
        "reports_so_far": [asdict(r) for r in reports],
    }
    with open("ppo_nonfinite_dump.json", "w") as f:
        json.dump(dump, f, indent=2)


# ---------------------------------------------------------------------------
# deterministic evaluation

def evaluate_policy(net: PolicyNet, mode: ReprMode, env_factory, episodes: int,
                    seed_base: int = 1_000_000):
    """Deterministic rollout of ``episodes`` episodes; the seed sequence is a
    pure function of seed_base so all methods share it."""
    successes = 0
    returns = []
    for ep in range(episodes):
        env = env_factory(seed_base + ep)
        _, obs = env.reset()
        total = 0.0
        while True:
            dist, _ = net.dist_and_value(collate([build_repr_input(obs, mode)]))
            action = pol.deterministic(dist)[0]
            _, obs, rb, terminated, success = env.step(action)
            total += rb.total
            if terminated:
                successes += int(success)
                returns.append(total)
                break
    return successes / episodes, float(np.mean(returns))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    task: str = "pick"
    variant: str = "fixed_target"
    n_cubes: int = 2
    n_plates: int = 1
    repr: str = "docir"
    seed: int = 0
    total_steps: int = 1_000_000
    resolution: int = 48
    out_dir: str = "runs/run0"
    init_set_path: str | None = None
    eval_every: int = 20          # updates between deterministic evals
    eval_episodes: int = 32       # during training
    final_eval_episodes: int = 100
    deterministic: bool = False   # single-threaded bit-reproducible mode
    hypers: PPOHypers = field(default_factory=PPOHypers)


def _scene_config(cfg: TrainConfig) -> SceneConfig:
    return SceneConfig(n_cubes=cfg.n_cubes, n_plates=cfg.n_plates,
                       resolution=cfg.resolution, variant=cfg.variant)


def build_mode_and_spec(cfg: TrainConfig):
    scene = _scene_config(cfg)
    mode = parse_repr_flag(cfg.repr, n_objects=scene.n_cubes + scene.n_plates
                           + scene.distractor_count)
    spec = NetSpec(stacks_per_view=mode.stacks_per_view(),
                   in_channels=mode.stack_channels,
                   height=cfg.resolution, width=cfg.resolution,
                   id_embed_dim=mode.id_embed_dim)
    return scene, mode, spec


def train(cfg: TrainConfig, env_factory=None, mode: ReprMode = None,
          spec: NetSpec = None):
    """Alternate collect/update until the step budget; periodically run a
    deterministic evaluation and track the best checkpoint by eval success.

    Returns a summary dict: checkpoint paths, best/final success, counters.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    if env_factory is None:
        scene, mode, spec = build_mode_and_spec(cfg)
        init_set = InitStateSet.load(cfg.init_set_path) if cfg.task == "place" else None

        def env_factory(seed):
            return PickPlaceEnv(scene, task=cfg.task, seed=seed, init_set=init_set)

    h = cfg.hypers
    net = PolicyNet(spec, seed=cfg.seed)
    optimizer = ad.Adam(net.params.values(), lr=h.lr, clip_norm=h.grad_clip)
    envs = [env_factory(cfg.seed * 10_000 + i) for i in range(h.n_envs)]
    collector = RolloutCollector(envs, mode)
    act_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    ckpt_last = os.path.join(cfg.out_dir, "ckpt_last.bin")
    ckpt_best = os.path.join(cfg.out_dir, "ckpt_best.bin")
    net.save(ckpt_last)

    n_updates = cfg.total_steps // (h.n_envs * h.rollout_len)
    best_success = -1.0
    t0 = time.monotonic()
    eval_count = 0

    def eval_seed_base(k):
        return 5_000_000 + 100_000 * k  # disjoint from training env seeds

    with open(metrics_path, "w") as mf:
        for upd in range(1, n_updates + 1):
            batch, stats = collector.collect(net, h.rollout_len, act_rng)
            report = update(batch, net, optimizer, h, mode, shuffle_rng)
            mf.write(json.dumps({
                "kind": "update", "step": collector.total_steps, "update": upd,
                "mean_return": stats["mean_return"],
                "success_rate": stats["success_rate"],
                "policy_loss": report.policy_loss,
                "value_loss": report.value_loss,
                "entropy": report.entropy,
                "clip_fraction": report.clip_fraction,
                "approx_kl": report.approx_kl,
                "wall_time": time.monotonic() - t0,
            }) + "\n")
            mf.flush()
            if upd % cfg.eval_every == 0 or upd == n_updates:
                rate, eval_ret = evaluate_policy(net, mode, env_factory,
                                                 cfg.eval_episodes,
                                                 seed_base=eval_seed_base(0))
                eval_count += 1
                mf.write(json.dumps({
                    "kind": "eval", "step": collector.total_steps, "update": upd,
                    "mean_return": eval_ret, "success_rate": rate,
                    "policy_loss": None, "value_loss": None, "entropy": None,
                    "clip_fraction": None, "approx_kl": None,
                    "wall_time": time.monotonic() - t0,
                }) + "\n")
                mf.flush()
                net.save(ckpt_last)
                if rate > best_success:
                    best_success = rate
                    net.save(ckpt_best)

    if best_success < 0:  # budget too small for any eval: best = initial
        net.save(ckpt_best)
        best_success = 0.0

    return {"metrics": metrics_path, "ckpt_last": ckpt_last, "ckpt_best": ckpt_best,
            "updates": n_updates, "steps": collector.total_steps,
            "evals": eval_count, "best_success": best_success}
