"""Visual encoders, fused scene embedding and actor-critic heads.

One shared CNN per camera view encodes every masked stack (or slot, or the
raw image); per-stack encodings are concatenated into the view encoding,
the two view encodings are fused with proprioception (plus an optional
learned target-id embedding for the ocr/flat baselines) and fed to
identical actor and critic MLP trunks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .simworld import Action

ENC_DIM = 128
TRUNK_WIDTH = 256
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
VIEWS = ("base", "wrist")


@dataclass(frozen=True)
class NetSpec:
    stacks_per_view: int        # 0 for proprio-only policies
    in_channels: int = 4        # 3 for flat
    height: int = 64
    width: int = 64
    proprio_dim: int = 11
    id_embed_dim: int = 0
    id_vocab: int = 64

    @property
    def fused_dim(self):
        vision = self.stacks_per_view * ENC_DIM * len(VIEWS) if self.stacks_per_view else 0
        return vision + self.proprio_dim + self.id_embed_dim


@dataclass
class ActionDist:
    arm_mean: np.ndarray        # (B, 3)
    arm_log_std: np.ndarray     # (3,), already clamped
    gripper_logit: np.ndarray   # (B,)


def _conv_out(n, k, s):
    return (n - k) // s + 1


class PolicyNet:
    """Parameter store plus forward pass. All parameters live in a flat
    name -> Tensor map so checkpoints are a plain ordered dump."""

    CONV = ((16, 5, 2), (32, 3, 2), (32, 3, 2))  # (out_channels, kernel, stride)

    def __init__(self, spec: NetSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

        if spec.stacks_per_view > 0:
            h, w = spec.height, spec.width
            for _, k, s in self.CONV:
                h, w = _conv_out(h, k, s), _conv_out(w, k, s)
            self._flat_dim = self.CONV[-1][0] * h * w
            for view in VIEWS:
                cin = spec.in_channels
                for i, (cout, k, _) in enumerate(self.CONV):
                    self._add(f"enc_{view}/conv{i}_w", rng.standard_normal((cout, cin, k, k))
                              * math.sqrt(2.0 / (cin * k * k)))
                    self._add(f"enc_{view}/conv{i}_b", np.zeros(cout))
                    cin = cout
                self._add(f"enc_{view}/fc_w", self._glorot(rng, self._flat_dim, ENC_DIM))
                self._add(f"enc_{view}/fc_b", np.zeros(ENC_DIM))

        if spec.id_embed_dim > 0:
            self._add("id_embed", rng.standard_normal((spec.id_vocab, spec.id_embed_dim)) * 0.1)

        d = spec.fused_dim
        for trunk in ("actor", "critic"):
            self._add(f"{trunk}/fc0_w", self._glorot(rng, d, TRUNK_WIDTH))
            self._add(f"{trunk}/fc0_b", np.zeros(TRUNK_WIDTH))
            self._add(f"{trunk}/fc1_w", self._glorot(rng, TRUNK_WIDTH, TRUNK_WIDTH))
            self._add(f"{trunk}/fc1_b", np.zeros(TRUNK_WIDTH))
        self._add("actor/mean_w", self._glorot(rng, TRUNK_WIDTH, 3) * 0.01)
        self._add("actor/mean_b", np.zeros(3))
        self._add("actor/grip_w", self._glorot(rng, TRUNK_WIDTH, 1) * 0.01)
        self._add("actor/grip_b", np.zeros(1))
        self._add("actor/log_std", np.full(3, -0.5))
        self._add("critic/v_w", self._glorot(rng, TRUNK_WIDTH, 1))
        self._add("critic/v_b", np.zeros(1))

    def _add(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)

    @staticmethod
    def _glorot(rng, fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    def param_count(self):
        return sum(p.data.size for p in self.params.values())

    # -- forward --------------------------------------------------------------

    def _encode_view(self, view, stacks):
        """stacks: (B, S, C, H, W) array -> Tensor (B, S*ENC_DIM)."""
        b, s = stacks.shape[:2]
        x = Tensor(stacks.reshape((b * s,) + stacks.shape[2:]))
        for i, (_, k, stride) in enumerate(self.CONV):
            x = ad.relu(ad.conv2d(x, self.params[f"enc_{view}/conv{i}_w"],
                                  self.params[f"enc_{view}/conv{i}_b"], stride=stride))
        x = ad.flatten(x)
        x = ad.affine(x, self.params[f"enc_{view}/fc_w"], self.params[f"enc_{view}/fc_b"])
        return ad.reshape(x, (b, s * ENC_DIM))

    def _trunk(self, name, fused):
        h = ad.tanh(ad.affine(fused, self.params[f"{name}/fc0_w"], self.params[f"{name}/fc0_b"]))
        return ad.tanh(ad.affine(h, self.params[f"{name}/fc1_w"], self.params[f"{name}/fc1_b"]))

    def forward(self, batch):
        """batch: {"views": {view: (B,S,C,H,W)}, "proprio": (B,P), "target_ids": (B,)}.

        Returns (arm_mean, arm_log_std, gripper_logit, value) Tensors.
        """
        pieces = []
        if self.spec.stacks_per_view > 0:
            for view in VIEWS:
                pieces.append(self._encode_view(view, batch["views"][view]))
        pieces.append(Tensor(np.asarray(batch["proprio"], dtype=np.float64)))
        if self.spec.id_embed_dim > 0:
            pieces.append(ad.embedding(self.params["id_embed"], batch["target_ids"]))
        fused = ad.concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]

        a = self._trunk("actor", fused)
        mean = ad.affine(a, self.params["actor/mean_w"], self.params["actor/mean_b"])
        logit = ad.reshape(ad.affine(a, self.params["actor/grip_w"],
                                     self.params["actor/grip_b"]), (-1,))
        log_std = ad.clip(self.params["actor/log_std"], LOG_STD_MIN, LOG_STD_MAX)
        c = self._trunk("critic", fused)
        value = ad.reshape(ad.affine(c, self.params["critic/v_w"],
                                     self.params["critic/v_b"]), (-1,))
        return mean, log_std, logit, value

    def dist_and_value(self, batch):
        """Graph-free forward for rollouts/evaluation."""
        with ad.no_grad():
            mean, log_std, logit, value = self.forward(batch)
        return (ActionDist(mean.data, log_std.data, logit.data), value.data)

    # -- checkpoints -----------------------------------------------------------

    def save(self, path):
        ad.save_params(path, self.params)

    def load(self, path):
        loaded = ad.load_params(path)
        if set(loaded) != set(self.params):
            raise ValueError("checkpoint parameter names do not match this net")
        for name, arr in loaded.items():
            if arr.shape != self.params[name].data.shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name].data = arr.astype(np.float64)


# ---------------------------------------------------------------------------
# mixed Gaussian (arm) x Bernoulli (gripper) distribution

LOG_2PI = math.log(2.0 * math.pi)


def sample(dist: ActionDist, rng) -> tuple[list[Action], np.ndarray]:
    """Sample actions; log-probs are computed pre-clamp (clamping happens at
    the env boundary). Returns (actions, log_probs (B,))."""
    std = np.exp(dist.arm_log_std)
    arm = dist.arm_mean + std * rng.standard_normal(dist.arm_mean.shape)
    logp_arm = (-0.5 * ((arm - dist.arm_mean) / std) ** 2
                - dist.arm_log_std - 0.5 * LOG_2PI).sum(axis=1)
    p_close = 1.0 / (1.0 + np.exp(-dist.gripper_logit))
    grip = np.where(rng.random(p_close.shape) < p_close, 1.0, -1.0)
    logp_grip = -np.logaddexp(0.0, -grip * dist.gripper_logit)
    actions = [Action(arm=arm[i], gripper=float(grip[i])) for i in range(len(grip))]
    return actions, logp_arm + logp_grip


def log_prob(dist: ActionDist, arm: np.ndarray, grip: np.ndarray) -> np.ndarray:
    std = np.exp(dist.arm_log_std)
    logp_arm = (-0.5 * ((arm - dist.arm_mean) / std) ** 2
                - dist.arm_log_std - 0.5 * LOG_2PI).sum(axis=1)
    logp_grip = -np.logaddexp(0.0, -grip * dist.gripper_logit)
    return logp_arm + logp_grip


def entropy(dist: ActionDist) -> np.ndarray:
    ent_arm = float((dist.arm_log_std + 0.5 * (LOG_2PI + 1.0)).sum())
    p = 1.0 / (1.0 + np.exp(-dist.gripper_logit))
    ent_grip = (p * np.logaddexp(0.0, -dist.gripper_logit)
                + (1.0 - p) * np.logaddexp(0.0, dist.gripper_logit))
    return ent_arm + ent_grip


def deterministic(dist: ActionDist) -> list[Action]:
    arm = np.clip(dist.arm_mean, -1.0, 1.0)
    grip = np.where(dist.gripper_logit >= 0.0, 1.0, -1.0)
    return [Action(arm=arm[i], gripper=float(grip[i])) for i in range(len(grip))]


# tensor-side versions used inside the PPO loss graph

def log_prob_t(mean_t, log_std_t, logit_t, arm: np.ndarray, grip: np.ndarray):
    inv_std = ad.exp(ad.mul(log_std_t, -1.0))
    z = ad.mul(ad.sub(Tensor(arm), mean_t), inv_std)
    logp_arm = ad.tsum(ad.sub(ad.mul(ad.square(z), -0.5),
                              ad.add(log_std_t, 0.5 * LOG_2PI)), axis=1)
    logp_grip = ad.mul(ad.softplus(ad.mul(logit_t, -grip)), -1.0)
    return ad.add(logp_arm, logp_grip)


def entropy_t(log_std_t, logit_t):
    """Mean entropy over the batch (scalar Tensor)."""
    ent_arm = ad.add(ad.tsum(log_std_t), 1.5 * (LOG_2PI + 1.0))
    p = ad.sigmoid(logit_t)
    ent_grip = ad.add(ad.mul(p, ad.softplus(ad.mul(logit_t, -1.0))),
                      ad.mul(ad.sub(1.0, p), ad.softplus(logit_t)))
    return ad.add(ent_arm, ad.tmean(ent_grip))


# ---------------------------------------------------------------------------
# batching helpers

def collate(repr_inputs):
    """Stack a list of ReprInput into the batch dict forward() expects."""
    batch = {"proprio": np.stack([r.proprio for r in repr_inputs]),
             "target_ids": np.array([r.target_id for r in repr_inputs], dtype=np.intp),
             "views": {}}
    if repr_inputs[0].views:
        for view in repr_inputs[0].views:
            batch["views"][view] = np.stack([r.views[view] for r in repr_inputs])
    return batch
