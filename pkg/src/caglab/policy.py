"""Tiny tanh MLP policy over (observation, instruction) with exact gradients.

The instruction slice of the input is a bag-of-tokens encoding with an extra
null token at index ``V``; an empty instruction is the null token alone. A
policy built with ``conditioned=False`` zeroes that slice before the first
layer, so its output cannot depend on language.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .sim import N_ACTIONS
from .suites import TOKEN_INDEX, VOCAB

log = logging.getLogger(__name__)

INSTR_DIM = len(VOCAB) + 1
NULL_INDEX = len(VOCAB)
PARAMS_MAGIC = "caglab-params/1"


class DimensionMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class Divergence(RuntimeError):
    pass


class ChecksumMismatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


def encode_instruction(tokens: Sequence[str]) -> np.ndarray:
    out = np.zeros(INSTR_DIM)
    if not tokens:
        out[NULL_INDEX] = 1.0
        return out
    for t in tokens:
        out[TOKEN_INDEX[t]] += 1.0
    return out / len(tokens)


def null_instruction() -> np.ndarray:
    return encode_instruction(())


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def normalize_exp(logp: np.ndarray) -> np.ndarray:
    e = np.exp(logp - logp.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: np.ndarray) -> np.ndarray:
    # routed through log_softmax so guidance endpoints reproduce it bit for bit
    return normalize_exp(log_softmax(z))


@dataclass
class PolicyParams:
    w1: np.ndarray  # (obs_dim + instr_dim, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, n_actions)
    b2: np.ndarray  # (n_actions,)
    obs_dim: int
    conditioned: bool = True
    seed: int = 0

    @property
    def instr_dim(self) -> int:
        return self.w1.shape[0] - self.obs_dim

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def n_actions(self) -> int:
        return self.w2.shape[1]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_arrays(self, arrays) -> "PolicyParams":
        w1, b1, w2, b2 = arrays
        return PolicyParams(w1, b1, w2, b2, self.obs_dim, self.conditioned, self.seed)

    def __eq__(self, other):
        return (
            isinstance(other, PolicyParams)
            and (self.obs_dim, self.conditioned, self.seed) == (other.obs_dim, other.conditioned, other.seed)
            and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))
        )


def init_params(
    obs_dim: int,
    hidden: int = 64,
    seed: int = 0,
    conditioned: bool = True,
    instr_dim: int = INSTR_DIM,
    n_actions: int = N_ACTIONS,
    scale: float = 0.5,
) -> PolicyParams:
    rng = np.random.default_rng(seed)
    d_in = obs_dim + instr_dim
    w1 = rng.normal(0.0, scale, size=(d_in, hidden))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, n_actions))
    return PolicyParams(w1, np.zeros(hidden), w2, np.zeros(n_actions), obs_dim, conditioned, seed)


def _inputs(params: PolicyParams, obs: np.ndarray, instr: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    instr = np.asarray(instr, dtype=np.float64)
    if obs.shape[-1] != params.obs_dim or instr.shape[-1] != params.instr_dim:
        raise DimensionMismatch(
            f"expected obs {params.obs_dim} / instr {params.instr_dim}, "
            f"got {obs.shape[-1]} / {instr.shape[-1]}"
        )
    if not params.conditioned:
        instr = np.zeros_like(instr)
    lead = np.broadcast_shapes(obs.shape[:-1], instr.shape[:-1])
    obs = np.broadcast_to(obs, lead + obs.shape[-1:])
    instr = np.broadcast_to(instr, lead + instr.shape[-1:])
    return np.concatenate([obs, instr], axis=-1)


def forward_logits(params: PolicyParams, obs: np.ndarray, instr: np.ndarray) -> np.ndarray:
    """Action logits; accepts single vectors or row-stacked batches."""
    x = _inputs(params, obs, instr)
    h = np.tanh(x @ params.w1 + params.b1)
    return h @ params.w2 + params.b2


def loss_and_grad(params: PolicyParams, obs, instr, actions) -> tuple[float, PolicyParams]:
    """Mean cross-entropy of the demonstrated actions and its exact gradient."""
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    if actions.size == 0:
        raise ValueError("empty batch")
    x = _inputs(params, np.atleast_2d(obs), np.atleast_2d(instr))
    n = x.shape[0]
    h = np.tanh(x @ params.w1 + params.b1)
    z = h @ params.w2 + params.b2
    lp = log_softmax(z)
    loss = -lp[np.arange(n), actions].mean()
    if not np.isfinite(loss):
        raise NonFiniteLoss("cross-entropy is not finite")
    dz = np.exp(lp)
    dz[np.arange(n), actions] -= 1.0
    dz /= n
    gw2 = h.T @ dz
    gb2 = dz.sum(axis=0)
    dpre = (dz @ params.w2.T) * (1.0 - h * h)
    gw1 = x.T @ dpre
    gb1 = dpre.sum(axis=0)
    return float(loss), params.with_arrays((gw1, gb1, gw2, gb2))


def _sparse_loss_and_grad(arrays, d_obs, idx, instr, actions):
    """``loss_and_grad`` for binary observations given as padded index rows.

    ``idx`` entries equal to ``d_obs`` are padding. Same maths as the dense
    path; the first layer becomes a row gather and a scatter-add.
    """
    w1, b1, w2, b2 = arrays
    n = len(actions)
    w_obs = np.vstack([w1[:d_obs], np.zeros((1, w1.shape[1]))])
    h = np.tanh(w_obs[idx].sum(axis=1) + instr @ w1[d_obs:] + b1)
    lp = log_softmax(h @ w2 + b2)
    rows = np.arange(n)
    loss = -lp[rows, actions].mean()
    if not np.isfinite(loss):
        raise NonFiniteLoss("cross-entropy is not finite")
    dz = np.exp(lp)
    dz[rows, actions] -= 1.0
    dz /= n
    dpre = (dz @ w2.T) * (1.0 - h * h)
    flat = idx.ravel()
    order = np.argsort(flat, kind="stable")
    cols, starts = np.unique(flat[order], return_index=True)
    gw1 = np.zeros((d_obs + 1, w1.shape[1]))
    gw1[cols] = np.add.reduceat(dpre[order // idx.shape[1]], starts, axis=0)
    gw1 = np.vstack([gw1[:d_obs], instr.T @ dpre])
    return float(loss), (gw1, dpre.sum(axis=0), h.T @ dz, dz.sum(axis=0))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    # calibrated: longer training memorizes the lone counterfactual demo
    epochs: int = 20
    batch_size: int = 256
    language_dropout_prob: float = 0.0
    seed: int = 0
    hidden: int = 64

    def __post_init__(self):
        if not 0.0 <= self.language_dropout_prob <= 1.0:
            raise ValueError("language_dropout_prob must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch_size and hidden must be positive")


def _flatten_dataset(ds):
    """Padded observation index matrix, instruction rows and action targets."""
    obs, instr_ids, actions = [], [], []
    instr_table: dict[tuple, int] = {}
    for d in ds.demonstrations:
        k = instr_table.setdefault(tuple(d.instruction), len(instr_table))
        obs.extend(d.observations)
        instr_ids.extend([k] * len(d.actions))
        actions.extend(d.actions)
    width = max(len(o) for o in obs)
    pad = ds.obs_dim  # points at an always-zero column
    idx = np.full((len(obs), width), pad, dtype=np.int64)
    for i, o in enumerate(obs):
        idx[i, : len(o)] = o
    table = np.stack([encode_instruction(t) for t in instr_table])
    return idx, table, np.asarray(instr_ids), np.asarray(actions, dtype=np.int64)


def train(
    ds,
    cfg: TrainConfig = TrainConfig(),
    conditioned: bool = True,
    history: Optional[list] = None,
) -> PolicyParams:
    """Minibatch Adam on the mean cross-entropy with a fixed shuffle stream.

    Samples picked by language dropout see the null instruction instead of
    their own. Per-epoch mean loss is appended to ``history`` if given.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    params = init_params(ds.obs_dim, cfg.hidden, cfg.seed, conditioned)
    rng = np.random.default_rng([cfg.seed, 1])
    idx, table, instr_ids, actions = _flatten_dataset(ds)
    null = null_instruction()
    n = len(actions)
    d_obs = ds.obs_dim

    b1_, b2_, eps = 0.9, 0.999, 1e-8
    arrays = [a.copy() for a in params.arrays()]
    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    t = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        drop = rng.random(n) < cfg.language_dropout_prob
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            instr = table[instr_ids[sel]]
            if cfg.language_dropout_prob > 0:
                instr = np.where(drop[sel, None], null, instr)
            if not conditioned:
                instr = np.zeros_like(instr)
            loss, grad = _sparse_loss_and_grad(arrays, d_obs, idx[sel], instr, actions[sel])
            total += loss * len(sel)
            t += 1
            lr_t = cfg.learning_rate * np.sqrt(1 - b2_**t) / (1 - b1_**t)
            for a, g, mm, vv in zip(arrays, grad, m, v):
                mm *= b1_
                mm += (1 - b1_) * g
                vv *= b2_
                vv += (1 - b2_) * (g * g)
                a -= lr_t * mm / (np.sqrt(vv) + eps)
        mean = total / n
        if not np.isfinite(mean) or not all(np.isfinite(a).all() for a in arrays):
            raise Divergence(f"training diverged at epoch {epoch}")
        if history is not None:
            history.append((epoch, mean))
        log.info("epoch %d loss %.6f", epoch, mean)
    return params.with_arrays(arrays)


def action_accuracy(params: PolicyParams, ds) -> float:
    idx, table, instr_ids, actions = _flatten_dataset(ds)
    obs = np.zeros((len(actions), ds.obs_dim + 1))
    obs[np.arange(len(actions))[:, None], idx] = 1.0
    z = forward_logits(params, obs[:, : ds.obs_dim], table[instr_ids])
    return float((z.argmax(axis=1) == actions).mean())


# ---------------------------------------------------------------------------
# *.params files
#   line 1: JSON header (dims, flags, seed, sha256 of the payload)
#   rest:   float64 little-endian, row-major: w1, b1, w2, b2
# ---------------------------------------------------------------------------


def params_bytes(params: PolicyParams) -> bytes:
    payload = params.flat().astype("<f8").tobytes()
    header = {
        "format": PARAMS_MAGIC,
        "obs_dim": params.obs_dim,
        "instr_dim": params.instr_dim,
        "hidden": params.hidden,
        "n_actions": params.n_actions,
        "conditioned": params.conditioned,
        "seed": params.seed,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    return (json.dumps(header, sort_keys=True) + "\n").encode() + payload


def save_params(params: PolicyParams, path) -> None:
    Path(path).write_bytes(params_bytes(params))


def load_params(path) -> PolicyParams:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise ShapeMismatch("missing header line")
    try:
        h = json.loads(head)
    except (ValueError, UnicodeDecodeError) as e:
        raise ChecksumMismatch(f"unreadable header: {e}") from e
    if h.get("format") != PARAMS_MAGIC:
        raise ShapeMismatch(f"unknown format {h.get('format')!r}")
    d_in = h["obs_dim"] + h["instr_dim"]
    H, A = h["hidden"], h["n_actions"]
    sizes = [d_in * H, H, H * A, A]
    if len(payload) != 8 * sum(sizes):
        raise ShapeMismatch(f"header implies {8 * sum(sizes)} payload bytes, file has {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != h["sha256"]:
        raise ChecksumMismatch("payload checksum does not match header")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    w1, b1, w2, b2 = parts[0].reshape(d_in, H), parts[1], parts[2].reshape(H, A), parts[3]
    return PolicyParams(w1, b1, w2, b2, h["obs_dim"], bool(h["conditioned"]), int(h["seed"]))


# ---------------------------------------------------------------------------
# Explicit joint tables for the guidance oracle
# ---------------------------------------------------------------------------


@dataclass
class LikelihoodTable:
    """Joint P(a, l | o) over actions (rows) and a finite instruction set (columns)."""

    joint: np.ndarray

    def __post_init__(self):
        self.joint = np.asarray(self.joint, dtype=np.float64)
        if self.joint.ndim != 2 or (self.joint < 0).any():
            raise ValueError("joint table must be a non-negative matrix")
        if abs(self.joint.sum() - 1.0) > 1e-12:
            raise ValueError("joint table must sum to 1")

    @classmethod
    def random(cls, n_actions: int, n_instructions: int, rng: np.random.Generator) -> "LikelihoodTable":
        j = rng.dirichlet(np.ones(n_actions * n_instructions)).reshape(n_actions, n_instructions)
        return cls(j)

    def prior(self) -> np.ndarray:
        """P(a | o)."""
        return self.joint.sum(axis=1)

    def instruction_marginal(self) -> np.ndarray:
        """P(l | o)."""
        return self.joint.sum(axis=0)

    def likelihood(self, instruction: int) -> np.ndarray:
        """P(l | a, o) for every action a (0 where P(a | o) = 0)."""
        p = self.prior()
        return np.divide(self.joint[:, instruction], p, out=np.zeros_like(p), where=p > 0)

    def posterior(self, instruction: int) -> np.ndarray:
        """P(a | o, l)."""
        col = self.joint[:, instruction]
        return col / col.sum()
