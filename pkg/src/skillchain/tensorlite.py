"""Minimal dense network core: ReLU MLPs with hand-written reverse-mode
gradients, Adam, EMA target updates, and squashed-Gaussian sampling.

Everything operates on float64 numpy arrays with an explicit batch axis.
Parameters are plain lists of (W, b) pairs so optimizers and target-network
code can treat them uniformly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
_SQUASH_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

CHECKPOINT_MAGIC = b"CSKC"
CHECKPOINT_VERSION = 1


def relu(z):
    return np.maximum(z, 0.0)


class MlpNet:
    """Fully connected ReLU network with a configurable output head.

    head:
      "identity"  raw final pre-activation
      "tanh"      affine-scaled tanh, componentwise into [out_lo, out_hi]
      "gaussian"  (mean, log_std) pair; final layer emits 2*out_dim values
                  and log_std is clamped to [LOG_STD_MIN, LOG_STD_MAX]

    Default shape is four weight layers (three hidden ReLU activations)
    of 256 units.
    """

    def __init__(self, in_dim, out_dim, hidden=256, n_layers=4, head="identity",
                 out_lo=None, out_hi=None, rng=None, final_scale=0.1):
        if head not in ("identity", "tanh", "gaussian"):
            raise ValueError(f"unknown head {head!r}")
        if n_layers < 1:
            raise ValueError("need at least one weight layer")
        if head == "tanh":
            if out_lo is None or out_hi is None:
                raise ValueError("tanh head needs out_lo/out_hi")
            out_lo = np.asarray(out_lo, dtype=np.float64)
            out_hi = np.asarray(out_hi, dtype=np.float64)
            if np.any(out_hi <= out_lo):
                raise ValueError("tanh head needs out_lo < out_hi per dim")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.head = head
        self.out_lo = out_lo
        self.out_hi = out_hi
        raw_out = 2 * out_dim if head == "gaussian" else out_dim
        widths = [in_dim] + [hidden] * (n_layers - 1) + [raw_out]
        self.params = []
        for k in range(n_layers):
            fan_in = widths[k]
            scale = 1.0 / np.sqrt(fan_in)
            if k == n_layers - 1:
                scale *= final_scale
            W = rng.uniform(-scale, scale, size=(widths[k], widths[k + 1]))
            b = np.zeros(widths[k + 1])
            self.params.append((W, b))

    # -- forward / backward ------------------------------------------------

    def forward(self, x):
        out, _ = self.forward_cache(x)
        return out

    def forward_cache(self, x):
        """Returns (head_output, cache) where cache feeds backward()."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.in_dim}")
        hs = [x]
        zs = []
        h = x
        n = len(self.params)
        for k, (W, b) in enumerate(self.params):
            z = h @ W + b
            zs.append(z)
            if k < n - 1:
                h = relu(z)
                hs.append(h)
        z_last = zs[-1]
        if self.head == "identity":
            out = z_last
            cache = (hs, zs, None)
        elif self.head == "tanh":
            t = np.tanh(z_last)
            mid = (self.out_lo + self.out_hi) / 2.0
            half = (self.out_hi - self.out_lo) / 2.0
            out = mid + half * t
            cache = (hs, zs, t)
        else:
            d = self.out_dim
            mu = z_last[:, :d]
            log_std_raw = z_last[:, d:]
            log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
            out = (mu, log_std)
            # keep the clamp mask so the gradient is zeroed where clamped
            mask = (log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX)
            cache = (hs, zs, mask)
        return out, cache

    def backward(self, cache, dout):
        """Exact gradients of the forward map.

        dout matches the head output shape; for the gaussian head pass a
        (dmu, dlog_std) tuple. Returns (param_grads, dx) where param_grads
        mirrors self.params.
        """
        hs, zs, extra = cache
        n = len(self.params)
        if self.head == "identity":
            dz = np.asarray(dout, dtype=np.float64)
        elif self.head == "tanh":
            t = extra
            half = (self.out_hi - self.out_lo) / 2.0
            dz = np.asarray(dout) * half * (1.0 - t * t)
        else:
            dmu, dls = dout
            mask = extra
            dz = np.concatenate(
                [np.asarray(dmu, dtype=np.float64),
                 np.asarray(dls, dtype=np.float64) * mask], axis=1)
        grads = [None] * n
        for k in range(n - 1, -1, -1):
            W, _ = self.params[k]
            h_in = hs[k]
            dW = h_in.T @ dz
            db = dz.sum(axis=0)
            grads[k] = (dW, db)
            dh = dz @ W.T
            if k > 0:
                dz = dh * (zs[k - 1] > 0.0)
        return grads, dh

    # -- parameter plumbing ------------------------------------------------

    def copy(self):
        import copy
        dup = object.__new__(MlpNet)
        dup.__dict__.update(self.__dict__)
        dup.params = [(W.copy(), b.copy()) for W, b in self.params]
        dup.out_lo = None if self.out_lo is None else np.array(self.out_lo)
        dup.out_hi = None if self.out_hi is None else np.array(self.out_hi)
        return dup

    def param_vector(self):
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()])
                               for W, b in self.params])

    def set_param_vector(self, vec):
        i = 0
        for k, (W, b) in enumerate(self.params):
            nW, nb = W.size, b.size
            self.params[k] = (vec[i:i + nW].reshape(W.shape).copy(),
                              vec[i + nW:i + nW + nb].copy())
            i += nW + nb
        if i != vec.size:
            raise ValueError("parameter vector size mismatch")

    def checksum(self):
        """Stable digest of the current parameters."""
        import hashlib
        h = hashlib.sha256()
        for W, b in self.params:
            h.update(W.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()


def forward(net, x):
    return net.forward(x)


def backward(net, x, upstream_gradient):
    """One-shot convenience: recompute forward, then backprop upstream."""
    _, cache = net.forward_cache(x)
    return net.backward(cache, upstream_gradient)


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam accumulators for a list of (W, b) parameter pairs."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-4):
        st = cls(lr=lr)
        st.m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
        st.v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
        return st


def adam_step(opt: AdamState, params, grads):
    """Standard bias-corrected Adam update, in place. Fails fast on
    non-finite gradients."""
    for gW, gb in grads:
        if not (np.isfinite(gW).all() and np.isfinite(gb).all()):
            raise FloatingPointError("non-finite gradient in adam_step")
    opt.step_count += 1
    t = opt.step_count
    b1, b2 = opt.beta1, opt.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, ((W, b), (gW, gb)) in enumerate(zip(params, grads)):
        mW, mb = opt.m[k]
        vW, vb = opt.v[k]
        mW *= b1
        mW += (1 - b1) * gW
        mb *= b1
        mb += (1 - b1) * gb
        vW *= b2
        vW += (1 - b2) * gW * gW
        vb *= b2
        vb += (1 - b2) * gb * gb
        W -= opt.lr * (mW / bc1) / (np.sqrt(vW / bc2) + opt.eps)
        b -= opt.lr * (mb / bc1) / (np.sqrt(vb / bc2) + opt.eps)
    return params


def ema_update(target_params, online_params, tau):
    """target <- (1 - tau) * target + tau * online, elementwise."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    for (tW, tb), (oW, ob) in zip(target_params, online_params):
        tW *= 1.0 - tau
        tW += tau * oW
        tb *= 1.0 - tau
        tb += tau * ob
    return target_params


# -- squashed Gaussian -----------------------------------------------------


@dataclass
class SquashSample:
    """Reparameterized sample with everything the chain rule needs."""

    action: np.ndarray
    log_prob: np.ndarray
    u: np.ndarray          # tanh(pre), before affine range scaling
    eps: np.ndarray
    std: np.ndarray
    half: np.ndarray


def sample_squashed(mu, log_std, rng, lo=-1.0, hi=1.0, eps=None):
    mu = np.atleast_2d(mu)
    log_std = np.atleast_2d(log_std)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    mid = (lo + hi) / 2.0
    half = (hi - lo) / 2.0
    std = np.exp(log_std)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    pre = mu + std * eps
    u = np.tanh(pre)
    action = mid + half * u
    log_prob = (
        -0.5 * eps * eps - log_std - _HALF_LOG_2PI
        - np.log(half * (1.0 - u * u) + _SQUASH_EPS)
    ).sum(axis=1)
    return SquashSample(action=action, log_prob=log_prob, u=u, eps=eps,
                        std=std, half=np.broadcast_to(half, mu.shape))


def sample_squashed_gaussian(head_output, rng, lo=-1.0, hi=1.0):
    """(action, log_prob) for a (mean, log_std) head output."""
    mu, log_std = head_output
    s = sample_squashed(mu, log_std, rng, lo, hi)
    return s.action, s.log_prob


def squash_mean(mu, lo=-1.0, hi=1.0):
    """Deterministic action: the squashed mean."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return (lo + hi) / 2.0 + (hi - lo) / 2.0 * np.tanh(mu)


def squash_sample_grads(sample: SquashSample, d_action, d_log_prob):
    """Chain rule through a reparameterized squashed sample.

    Given upstream gradients w.r.t. the action (batch, d) and the log-prob
    (batch,), returns (d_mu, d_log_std).
    """
    u = sample.u
    half = sample.half
    one_minus_u2 = 1.0 - u * u
    denom = half * one_minus_u2 + _SQUASH_EPS
    dlp = np.asarray(d_log_prob, dtype=np.float64).reshape(-1, 1)
    # action path: a = mid + half * tanh(pre)
    dpre = np.asarray(d_action) * half * one_minus_u2
    # log-prob path: d/dpre [-log(half (1-u^2) + eps)] = 2 half u (1-u^2)/denom
    dpre = dpre + dlp * (2.0 * half * u * one_minus_u2 / denom)
    d_mu = dpre
    d_log_std = dpre * sample.std * sample.eps - dlp
    return d_mu, d_log_std


def squashed_log_prob(mu, log_std, action, lo=-1.0, hi=1.0):
    """Log density of a given action under the squashed Gaussian.

    Also returns (d/d_mu, d/d_log_std) of the summed log-prob per sample,
    which the self-imitation term needs. Actions are clipped into the open
    interval before the inverse tanh so boundary values stay finite.
    """
    mu = np.atleast_2d(mu)
    log_std = np.atleast_2d(log_std)
    action = np.atleast_2d(action)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    mid = (lo + hi) / 2.0
    half = (hi - lo) / 2.0
    u = np.clip((action - mid) / half, -1.0 + _SQUASH_EPS, 1.0 - _SQUASH_EPS)
    pre = np.arctanh(u)
    std = np.exp(log_std)
    z = (pre - mu) / std
    log_prob = (
        -0.5 * z * z - log_std - _HALF_LOG_2PI
        - np.log(half * (1.0 - u * u) + _SQUASH_EPS)
    ).sum(axis=1)
    d_mu = z / std
    d_log_std = z * z - 1.0
    return log_prob, d_mu, d_log_std


def atanh_clipped(x, lo=-1.0, hi=1.0, margin=1e-3):
    """Map an action back to pre-squash space, clipping into the open
    interval first so actions at the range boundary stay finite. The
    default margin keeps saturated targets at a trainable magnitude
    (atanh(0.999) ~ 3.8)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    mid = (lo + hi) / 2.0
    half = (hi - lo) / 2.0
    u = np.clip((np.asarray(x) - mid) / half, -1.0 + margin, 1.0 - margin)
    return np.arctanh(u)


# -- checkpoint format -----------------------------------------------------


def save_params(path, sections):
    """Write named parameter lists to a binary checkpoint.

    sections: dict name -> list of float arrays. Stored as little-endian
    float32 with self-describing shapes (magic "CSKC").
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HH", CHECKPOINT_VERSION, len(sections)))
        for name, arrays in sections.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<H", len(arrays)))
            for arr in arrays:
                arr = np.asarray(arr, dtype=np.float64)
                f.write(struct.pack("<B", arr.ndim))
                for s in arr.shape:
                    f.write(struct.pack("<I", s))
                f.write(arr.astype("<f4").tobytes())


def load_params(path):
    """Inverse of save_params; returns dict name -> list of float64 arrays."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, n_sections = struct.unpack("<HH", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        sections = {}
        for _ in range(n_sections):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (n_arrays,) = struct.unpack("<H", f.read(2))
            arrays = []
            for _ in range(n_arrays):
                (ndim,) = struct.unpack("<B", f.read(1))
                shape = tuple(struct.unpack("<I", f.read(4))[0]
                              for _ in range(ndim))
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(f.read(4 * count), dtype="<f4")
                arrays.append(data.astype(np.float64).reshape(shape))
            sections[name] = arrays
    return sections


def net_params_flat(net: MlpNet):
    out = []
    for W, b in net.params:
        out.append(W)
        out.append(b)
    return out


def set_net_params_flat(net: MlpNet, arrays):
    if len(arrays) != 2 * len(net.params):
        raise ValueError("array count mismatch for network")
    for k in range(len(net.params)):
        W, b = arrays[2 * k], arrays[2 * k + 1]
        if W.shape != net.params[k][0].shape or b.shape != net.params[k][1].shape:
            raise ValueError("checkpoint shape mismatch")
        net.params[k] = (W.copy(), b.copy())
