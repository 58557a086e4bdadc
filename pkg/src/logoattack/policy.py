"""Autoregressive categorical policy: a GRU cell unrolled over a fixed number
of action steps, one linear head per step, trained with REINFORCE.

Gradients (including backprop through time) are written out by hand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"SLAP"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def masked_softmax(logits: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    z = logits if mask is None else np.where(mask, logits, -np.inf)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class _StepCache:
    x: np.ndarray
    h_prev: np.ndarray
    r: np.ndarray
    z: np.ndarray
    n: np.ndarray
    hn: np.ndarray
    h: np.ndarray
    probs: np.ndarray


@dataclass
class Rollout:
    """Sampled action indices plus what backprop needs."""

    actions: list
    logprobs: list
    caches: list = field(repr=False, default_factory=list)

    @property
    def logprob(self) -> float:
        return float(sum(self.logprobs))


class Policy:
    def __init__(self, head_sizes: Sequence[int], hidden: int = 64, embed: int = 32,
                 seed: int = 0, init_scale: float = 0.1, zero_heads: bool = True):
        if not head_sizes or min(head_sizes) < 1:
            raise ValueError("every action step needs at least one choice")
        self.head_sizes = tuple(int(n) for n in head_sizes)
        self.hidden = hidden
        self.embed = embed
        rng = np.random.default_rng(seed)
        H, D = hidden, embed

        def rnd(*shape):
            return rng.normal(0.0, init_scale, size=shape)

        p = {"start": rnd(D)}
        for t in range(1, len(self.head_sizes)):
            p[f"emb{t}"] = rnd(self.head_sizes[t - 1], D)
        p["w_ih"] = rnd(3 * H, D)
        p["w_hh"] = rnd(3 * H, H)
        p["b_ih"] = np.zeros(3 * H)
        p["b_hh"] = np.zeros(3 * H)
        for t, n in enumerate(self.head_sizes):
            p[f"w_out{t}"] = np.zeros((n, H)) if zero_heads else rnd(n, H)
            p[f"b_out{t}"] = np.zeros(n)
        self.params = p

    @property
    def n_steps(self) -> int:
        return len(self.head_sizes)

    def copy(self) -> "Policy":
        other = object.__new__(Policy)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    # -- forward ---------------------------------------------------------------

    def _cell(self, x, h):
        H = self.hidden
        p = self.params
        gi = p["w_ih"] @ x + p["b_ih"]
        gh = p["w_hh"] @ h + p["b_hh"]
        r = _sigmoid(gi[:H] + gh[:H])
        z = _sigmoid(gi[H:2 * H] + gh[H:2 * H])
        hn = gh[2 * H:]
        n = np.tanh(gi[2 * H:] + r * hn)
        h_new = (1.0 - z) * n + z * h
        return h_new, (r, z, n, hn)

    def _input(self, t: int, prev_action: Optional[int]) -> np.ndarray:
        return self.params["start"] if t == 0 else self.params[f"emb{t}"][prev_action]

    def rollout(self, choose: Callable[[int, np.ndarray], int],
                mask_fn: Optional[Callable[[int, list], Optional[np.ndarray]]] = None) -> Rollout:
        """Run the policy, letting ``choose(step, probs)`` pick each action."""
        h = np.zeros(self.hidden)
        actions, logps, caches = [], [], []
        for t in range(self.n_steps):
            x = self._input(t, actions[-1] if actions else None)
            h_new, (r, z, n, hn) = self._cell(x, h)
            logits = self.params[f"w_out{t}"] @ h_new + self.params[f"b_out{t}"]
            mask = mask_fn(t, actions) if mask_fn is not None else None
            probs = masked_softmax(logits, mask)
            a = int(choose(t, probs))
            if probs[a] <= 0:
                raise ValueError(f"step {t}: action {a} has zero probability")
            actions.append(a)
            logps.append(float(np.log(probs[a])))
            caches.append(_StepCache(x, h, r, z, n, hn, h_new, probs))
            h = h_new
        return Rollout(actions, logps, caches)

    def sample(self, rng: np.random.Generator, mask_fn=None) -> Rollout:
        return self.rollout(lambda t, probs: rng.choice(len(probs), p=probs), mask_fn)

    def evaluate(self, actions: Sequence[int], mask_fn=None) -> Rollout:
        """Re-run the policy along fixed actions (log-probs + caches)."""
        return self.rollout(lambda t, probs: actions[t], mask_fn)

    def step_probs(self, prefix: Sequence[int], mask_fn=None) -> np.ndarray:
        """Action distribution at step ``len(prefix)`` given earlier actions."""
        out = {}

        def choose(t, probs):
            if t == len(prefix):
                out["p"] = probs
                raise StopIteration
            return prefix[t]
        try:
            self.rollout(choose, mask_fn)
        except StopIteration:
            pass
        return out["p"]

    # -- backward --------------------------------------------------------------

    def grad_logprob(self, roll: Rollout, weight: float = 1.0, grads: Optional[dict] = None) -> dict:
        """Accumulate ``weight * d(sum_t log pi(a_t)) / d(params)`` into ``grads``."""
        p = self.params
        H = self.hidden
        if grads is None:
            grads = {k: np.zeros_like(v) for k, v in p.items()}
        dh_next = np.zeros(H)
        for t in reversed(range(self.n_steps)):
            c = roll.caches[t]
            a = roll.actions[t]
            dlogits = -weight * c.probs
            dlogits[a] += weight
            grads[f"w_out{t}"] += np.outer(dlogits, c.h)
            grads[f"b_out{t}"] += dlogits
            dh = p[f"w_out{t}"].T @ dlogits + dh_next

            dn = dh * (1.0 - c.z)
            dz = dh * (c.h_prev - c.n)
            dh_prev = dh * c.z
            dn_pre = dn * (1.0 - c.n ** 2)
            dr = dn_pre * c.hn
            dr_pre = dr * c.r * (1.0 - c.r)
            dz_pre = dz * c.z * (1.0 - c.z)
            d_gi = np.concatenate([dr_pre, dz_pre, dn_pre])
            d_gh = np.concatenate([dr_pre, dz_pre, dn_pre * c.r])
            grads["w_ih"] += np.outer(d_gi, c.x)
            grads["b_ih"] += d_gi
            grads["w_hh"] += np.outer(d_gh, c.h_prev)
            grads["b_hh"] += d_gh
            dx = p["w_ih"].T @ d_gi
            dh_prev += p["w_hh"].T @ d_gh
            if t == 0:
                grads["start"] += dx
            else:
                grads[f"emb{t}"][roll.actions[t - 1]] += dx
            dh_next = dh_prev
        return grads

    def apply(self, grads: dict, lr: float) -> None:
        for k, g in grads.items():
            self.params[k] += lr * g

    # -- checkpoint ------------------------------------------------------------

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def save(self, path) -> None:
        vec = self.flat().astype("<f4")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<Q", vec.size))
            fh.write(vec.tobytes())

    def load(self, path) -> None:
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a policy checkpoint")
        (version,) = struct.unpack("<I", blob[4:8])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", blob[8:16])
        vec = np.frombuffer(blob, dtype="<f4", offset=16)
        if vec.size != count or count != self.flat().size:
            raise ValueError(f"{path}: expected {self.flat().size} parameters, found {count}")
        off = 0
        for k in sorted(self.params):
            n = self.params[k].size
            self.params[k] = vec[off:off + n].astype(np.float64).reshape(self.params[k].shape)
            off += n


def reinforce_gradient(policy: Policy, rollouts: Sequence[Rollout], rewards: Sequence[float],
                       baseline: str = "mean") -> dict:
    """Ascent direction ``(1/N) sum_tau (R - b) grad log pi(tau)``."""
    if len(rollouts) < 1 or len(rollouts) != len(rewards):
        raise ValueError("need one reward per rollout and at least one rollout")
    rewards = np.asarray(rewards, dtype=np.float64)
    b = rewards.mean() if baseline == "mean" else 0.0
    adv = rewards - b
    grads = {k: np.zeros_like(v) for k, v in policy.params.items()}
    for roll, a in zip(rollouts, adv):
        if a != 0.0:
            policy.grad_logprob(roll, a / len(rollouts), grads)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
    return grads


def reinforce_step(policy: Policy, rollouts, rewards, lr: float, baseline: str = "mean",
                   max_norm: Optional[float] = None) -> Policy:
    """One gradient-ascent step on expected reward, in place; returns ``policy``."""
    grads = reinforce_gradient(policy, rollouts, rewards, baseline)
    if max_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > max_norm:
            grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    policy.apply(grads, lr)
    return policy
