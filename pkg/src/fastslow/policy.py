"""Attention actor-critic over per-vehicle observation rows.

Small pre-norm transformer trunk shared by an action head and a value head,
implemented directly in numpy with a hand-written reverse pass so the whole
thing stays checkable against finite differences.  All math runs in float64;
checkpoints store float32.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import erf

from .actions import N_ACTIONS
from .observation import N_FEATURES, N_ROWS

CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class InvalidDims(ValueError):
    """Architecture hyperparameters that cannot form a valid network."""


class ShapeMismatch(ValueError):
    """Input tensor does not match the network's expected shape."""


class NonFiniteLoss(FloatingPointError):
    """NaN/inf appeared in the loss or its gradients."""


class BadCheckpoint(ValueError):
    """Checkpoint file is corrupt or from an incompatible version."""


@dataclass(frozen=True)
class PolicyDims:
    n_features: int = N_FEATURES
    d_model: int = 128
    n_heads: int = 2
    n_blocks: int = 2
    n_actions: int = N_ACTIONS
    ffn_mult: int = 4

    def __post_init__(self) -> None:
        for name in ("n_features", "d_model", "n_heads", "n_blocks",
                     "n_actions", "ffn_mult"):
            if getattr(self, name) < 1:
                raise InvalidDims(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise InvalidDims(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ffn(self) -> int:
        return self.ffn_mult * self.d_model

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "d_model": self.d_model,
                "n_heads": self.n_heads, "n_blocks": self.n_blocks,
                "n_actions": self.n_actions, "ffn_mult": self.ffn_mult}


@dataclass
class PolicyParams:
    dims: PolicyDims
    arrays: dict[str, np.ndarray]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.arrays.items())

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(rng: np.random.Generator,
                dims: PolicyDims | None = None) -> PolicyParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, fixed key order."""
    d = dims or PolicyDims()
    dm, df = d.d_model, d.d_ffn
    arrays: dict[str, np.ndarray] = {
        "embed.W": _uniform(rng, d.n_features, (d.n_features, dm)),
        "embed.b": np.zeros(dm),
    }
    for i in range(d.n_blocks):
        p = f"block{i}."
        for name in ("Wq", "Wk", "Wv", "Wo"):
            arrays[p + "attn." + name] = _uniform(rng, dm, (dm, dm))
        arrays[p + "ffn.W1"] = _uniform(rng, dm, (dm, df))
        arrays[p + "ffn.b1"] = np.zeros(df)
        arrays[p + "ffn.W2"] = _uniform(rng, df, (df, dm))
        arrays[p + "ffn.b2"] = np.zeros(dm)
    arrays["pi.W"] = _uniform(rng, dm, (dm, d.n_actions))
    arrays["pi.b"] = np.zeros(d.n_actions)
    arrays["v.W"] = _uniform(rng, dm, (dm, 1))
    arrays["v.b"] = np.zeros(1)
    return PolicyParams(d, arrays)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _layer_norm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Affine-free layer norm over the last axis -> (y, inv_std)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    return (x - mu) * inv_std, inv_std


def _layer_norm_grad(y: np.ndarray, inv_std: np.ndarray,
                     dy: np.ndarray) -> np.ndarray:
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = (dy * y).mean(axis=-1, keepdims=True)
    return inv_std * (dy - m1 - y * m2)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, n, dm = x.shape
    return x.reshape(b, n, n_heads, dm // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _stable_log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class ForwardTrace:
    obs: np.ndarray
    embed_out: np.ndarray
    blocks: list = field(default_factory=list)
    final_y: np.ndarray | None = None
    final_inv_std: np.ndarray | None = None
    h_ego: np.ndarray | None = None
    logits: np.ndarray | None = None
    log_probs: np.ndarray | None = None
    probs: np.ndarray | None = None
    values: np.ndarray | None = None


def forward(params: PolicyParams, obs: np.ndarray) -> ForwardTrace:
    """Batched forward pass; caches everything the reverse pass needs."""
    d = params.dims
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
    if obs.ndim != 3 or obs.shape[2] != d.n_features:
        raise ShapeMismatch(
            f"expected (batch, rows, {d.n_features}), got {obs.shape}")

    a = params.arrays
    x = obs @ a["embed.W"] + a["embed.b"]
    trace = ForwardTrace(obs=obs, embed_out=x)
    scale = 1.0 / np.sqrt(d.d_head)

    for i in range(d.n_blocks):
        p = f"block{i}."
        ln1_y, ln1_inv = _layer_norm(x)
        q = _split_heads(ln1_y @ a[p + "attn.Wq"], d.n_heads)
        k = _split_heads(ln1_y @ a[p + "attn.Wk"], d.n_heads)
        v = _split_heads(ln1_y @ a[p + "attn.Wv"], d.n_heads)
        scores = np.einsum("bhqd,bhkd->bhqk", q, k) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        mixed = np.einsum("bhqk,bhkd->bhqd", weights, v)
        concat = _merge_heads(mixed)
        attn_out = concat @ a[p + "attn.Wo"]
        res1 = x + attn_out

        ln2_y, ln2_inv = _layer_norm(res1)
        pre = ln2_y @ a[p + "ffn.W1"] + a[p + "ffn.b1"]
        act = _gelu(pre)
        ffn_out = act @ a[p + "ffn.W2"] + a[p + "ffn.b2"]
        x = res1 + ffn_out

        trace.blocks.append({
            "ln1_y": ln1_y, "ln1_inv": ln1_inv, "q": q, "k": k, "v": v,
            "weights": weights, "concat": concat, "res1": res1,
            "ln2_y": ln2_y, "ln2_inv": ln2_inv, "pre": pre, "act": act,
        })

    final_y, final_inv = _layer_norm(x)
    h_ego = final_y[:, 0, :]
    logits = h_ego @ a["pi.W"] + a["pi.b"]
    log_probs = _stable_log_softmax(logits)
    probs = np.exp(log_probs)
    values = (h_ego @ a["v.W"] + a["v.b"])[:, 0]

    trace.final_y = final_y
    trace.final_inv_std = final_inv
    trace.h_ego = h_ego
    trace.logits = logits
    trace.log_probs = log_probs
    trace.probs = probs
    trace.values = values
    return trace


def policy_outputs(params: PolicyParams,
                   obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Single-observation convenience -> (probs, log_probs, value)."""
    t = forward(params, obs)
    return t.probs[0], t.log_probs[0], float(t.values[0])


def sample_action(params: PolicyParams, obs: np.ndarray,
                  rng: np.random.Generator) -> tuple[int, float, float, np.ndarray]:
    probs, log_probs, value = policy_outputs(params, obs)
    action = int(rng.choice(len(probs), p=probs / probs.sum()))
    return action, float(log_probs[action]), value, probs


def evaluate_actions(params: PolicyParams, obs: np.ndarray,
                     actions: np.ndarray,
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log-prob of taken actions, per-sample entropy, values."""
    t = forward(params, obs)
    actions = np.asarray(actions, dtype=np.int64)
    if actions.ndim != 1 or actions.shape[0] != t.logits.shape[0]:
        raise ShapeMismatch(f"actions shape {actions.shape} does not match batch")
    taken = t.log_probs[np.arange(len(actions)), actions]
    ent = entropy_from_log_probs(t.log_probs)
    return taken, ent, t.values


def entropy_from_log_probs(log_probs: np.ndarray) -> np.ndarray:
    p = np.exp(log_probs)
    plogp = np.zeros_like(p)
    mask = p > 0.0
    plogp[mask] = p[mask] * log_probs[mask]   # avoids 0 * -inf
    return -plogp.sum(axis=-1)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def backward(params: PolicyParams, trace: ForwardTrace,
             d_logits: np.ndarray, d_values: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given dL/dlogits and dL/dvalue."""
    d = params.dims
    a = params.arrays
    grads = params.zeros_like()
    scale = 1.0 / np.sqrt(d.d_head)

    grads["pi.W"] = trace.h_ego.T @ d_logits
    grads["pi.b"] = d_logits.sum(axis=0)
    grads["v.W"] = (trace.h_ego.T @ d_values)[:, None]
    grads["v.b"][0] = d_values.sum()
    d_h_ego = d_logits @ a["pi.W"].T + d_values[:, None] * a["v.W"][:, 0]

    d_final_y = np.zeros_like(trace.final_y)
    d_final_y[:, 0, :] = d_h_ego
    dx = _layer_norm_grad(trace.final_y, trace.final_inv_std, d_final_y)

    for i in reversed(range(d.n_blocks)):
        p = f"block{i}."
        c = trace.blocks[i]

        # x_out = res1 + ffn(ln2(res1))
        d_ffn_out = dx
        grads[p + "ffn.W2"] = np.einsum("bnf,bnd->fd", c["act"], d_ffn_out)
        grads[p + "ffn.b2"] = d_ffn_out.sum(axis=(0, 1))
        d_act = d_ffn_out @ a[p + "ffn.W2"].T
        d_pre = d_act * _gelu_grad(c["pre"])
        grads[p + "ffn.W1"] = np.einsum("bnd,bnf->df", c["ln2_y"], d_pre)
        grads[p + "ffn.b1"] = d_pre.sum(axis=(0, 1))
        d_ln2_y = d_pre @ a[p + "ffn.W1"].T
        d_res1 = dx + _layer_norm_grad(c["ln2_y"], c["ln2_inv"], d_ln2_y)

        # res1 = x_in + attn(ln1(x_in))
        d_attn_out = d_res1
        grads[p + "attn.Wo"] = np.einsum("bnd,bne->de", c["concat"], d_attn_out)
        d_concat = d_attn_out @ a[p + "attn.Wo"].T
        d_mixed = _split_heads(d_concat, d.n_heads)
        d_weights = np.einsum("bhqd,bhkd->bhqk", d_mixed, c["v"])
        d_v = np.einsum("bhqk,bhqd->bhkd", c["weights"], d_mixed)
        w = c["weights"]
        d_scores = w * (d_weights - (d_weights * w).sum(axis=-1, keepdims=True))
        d_q = np.einsum("bhqk,bhkd->bhqd", d_scores, c["k"]) * scale
        d_k = np.einsum("bhqk,bhqd->bhkd", d_scores, c["q"]) * scale

        d_ln1_y = np.zeros_like(c["ln1_y"])
        for name, dv in (("Wq", d_q), ("Wk", d_k), ("Wv", d_v)):
            flat = _merge_heads(dv)
            grads[p + "attn." + name] = np.einsum("bnd,bne->de", c["ln1_y"], flat)
            d_ln1_y += flat @ a[p + "attn." + name].T
        dx = d_res1 + _layer_norm_grad(c["ln1_y"], c["ln1_inv"], d_ln1_y)

    grads["embed.W"] = np.einsum("bnf,bnd->fd", trace.obs, dx)
    grads["embed.b"] = dx.sum(axis=(0, 1))
    return grads


# ---------------------------------------------------------------------------
# PPO objective
# ---------------------------------------------------------------------------

def ppo_loss_and_grads(params: PolicyParams, obs: np.ndarray,
                       actions: np.ndarray, old_log_probs: np.ndarray,
                       advantages: np.ndarray, value_targets: np.ndarray,
                       clip_eps: float = 0.2, critic_coef: float = 0.5,
                       entropy_coef: float = 0.01,
                       ) -> tuple[dict, dict[str, np.ndarray]]:
    """Clipped-surrogate loss with analytic logits/value gradients.

    Loss = -mean(min(rho*A, clip(rho)*A)) + c_v*mean((V-target)^2)
           - c_H*mean(entropy).  Raises NonFiniteLoss on NaN/inf.
    """
    trace = forward(params, obs)
    b = trace.logits.shape[0]
    actions = np.asarray(actions, dtype=np.int64)
    idx = np.arange(b)

    new_lp = trace.log_probs[idx, actions]
    ratio = np.exp(new_lp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surr1 = ratio * advantages
    surr2 = clipped * advantages
    policy_loss = -np.minimum(surr1, surr2).mean()

    v_err = trace.values - value_targets
    value_loss = float((v_err ** 2).mean())

    ent = entropy_from_log_probs(trace.log_probs)
    entropy = float(ent.mean())

    loss = policy_loss + critic_coef * value_loss - entropy_coef * entropy
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is not finite: {loss}")

    # d(policy_loss)/dlogits: the clipped branch has zero gradient.
    active = surr1 <= surr2
    coef = np.where(active, ratio * advantages, 0.0)
    one_hot = np.zeros_like(trace.log_probs)
    one_hot[idx, actions] = 1.0
    d_logits = -coef[:, None] * (one_hot - trace.probs) / b

    # d(-c_H * mean entropy)/dlogits
    lp_safe = np.where(trace.probs > 0.0, trace.log_probs, 0.0)
    d_ent = -trace.probs * (lp_safe + ent[:, None])
    d_logits += -entropy_coef * d_ent / b

    d_values = critic_coef * 2.0 * v_err / b

    grads = backward(params, trace, d_logits, d_values)
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"gradient for {key} is not finite")

    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float((~active).mean()),
        "approx_kl": float(np.mean(old_log_probs - new_lp)),
    }
    return stats, grads


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian float32 blob in one file
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: PolicyParams, extra: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in params.arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        offset += len(data)
        blobs.append(data)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dims": params.dims.to_dict(),
        "arrays": entries,
        "extra": extra or {},
    }
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise BadCheckpoint(f"bad magic {magic!r}")
            (header_len,) = struct.unpack("<I", fh.read(4))
            manifest = json.loads(fh.read(header_len).decode("utf-8"))
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise BadCheckpoint(
                    f"unsupported version {manifest.get('version')}")
            payload = fh.read()
    except (OSError, struct.error, UnicodeDecodeError,
            json.JSONDecodeError) as exc:
        raise BadCheckpoint(str(exc)) from exc

    dims = PolicyDims(**manifest["dims"])
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = payload[start:start + nbytes]
        if len(chunk) != nbytes:
            raise BadCheckpoint(f"truncated blob for {entry['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return PolicyParams(dims, arrays), manifest.get("extra", {})
