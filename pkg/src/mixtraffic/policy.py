"""Shared-parameter MLP policy with Gaussian and categorical heads.

Everything is plain numpy: the forward pass, reverse-mode gradients of
weighted log-probabilities, and the Fisher (KL Hessian) vector product
computed as J^T M J v with a forward-mode pass followed by a reverse pass.

Parameter vector order: W1, b1, W2, b2, W3, b3, log_std.
Actions are float matrices with one column per Gaussian dimension and one
column (the index) per categorical head.
"""
import json
import math
from dataclasses import dataclass

import numpy as np

from .sim.params import ContractViolation

HIDDEN = 64
CHECKPOINT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Head:
    kind: str  # "gaussian" or "categorical"
    size: int  # action dimension (gaussian) or number of classes (categorical)

    def __post_init__(self):
        if self.kind not in ("gaussian", "categorical") or self.size < 1:
            raise ContractViolation(f"bad head {self}")

    @property
    def out_width(self) -> int:
        return self.size

    @property
    def action_width(self) -> int:
        return self.size if self.kind == "gaussian" else 1


@dataclass(frozen=True)
class PolicySpec:
    in_dim: int
    heads: tuple
    hidden: int = HIDDEN

    @property
    def out_dim(self) -> int:
        return sum(h.out_width for h in self.heads)

    @property
    def n_gauss(self) -> int:
        return sum(h.size for h in self.heads if h.kind == "gaussian")

    @property
    def action_dim(self) -> int:
        return sum(h.action_width for h in self.heads)

    def shapes(self):
        i, h, o = self.in_dim, self.hidden, self.out_dim
        return [(i, h), (h,), (h, h), (h,), (h, o), (o,), (self.n_gauss,)]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes())

    def layout(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.hidden,
                "heads": [[h.kind, h.size] for h in self.heads]}

    @classmethod
    def from_layout(cls, d: dict) -> "PolicySpec":
        return cls(int(d["in_dim"]), tuple(Head(k, int(s)) for k, s in d["heads"]),
                   int(d.get("hidden", HIDDEN)))


class PolicyParams:
    """Weights of the MLP; ``arrays`` follow :meth:`PolicySpec.shapes`."""

    def __init__(self, spec: PolicySpec, arrays):
        self.spec = spec
        self.arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        for a, s in zip(self.arrays, spec.shapes()):
            if a.shape != s:
                raise ContractViolation(f"parameter shape {a.shape} != {s}")

    W1 = property(lambda self: self.arrays[0])
    b1 = property(lambda self: self.arrays[1])
    W2 = property(lambda self: self.arrays[2])
    b2 = property(lambda self: self.arrays[3])
    W3 = property(lambda self: self.arrays[4])
    b3 = property(lambda self: self.arrays[5])
    log_std = property(lambda self: self.arrays[6])


def flatten(params: PolicyParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays])


def unflatten(spec: PolicySpec, vec) -> PolicyParams:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size != spec.n_params:
        raise ContractViolation(f"expected {spec.n_params} parameters, got {vec.shape}")
    arrays, k = [], 0
    for s in spec.shapes():
        n = int(np.prod(s))
        arrays.append(vec[k:k + n].reshape(s).copy())
        k += n
    return PolicyParams(spec, arrays)


def _orthogonal(rng, shape, gain):
    a = rng.standard_normal(shape)
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == shape else vt
    return gain * q


def init_params(spec: PolicySpec, rng: np.random.Generator, c_accel: float = 2.6) -> PolicyParams:
    """Orthogonal init; output layer scaled by 0.01; log-std at ln(0.5 c_accel)."""
    i, h, o = spec.in_dim, spec.hidden, spec.out_dim
    arrays = [
        _orthogonal(rng, (i, h), math.sqrt(2.0)), np.zeros(h),
        _orthogonal(rng, (h, h), math.sqrt(2.0)), np.zeros(h),
        _orthogonal(rng, (h, o), 0.01), np.zeros(o),
        np.full(spec.n_gauss, math.log(0.5 * c_accel)),
    ]
    return PolicyParams(spec, arrays)


def zero_params(spec: PolicySpec) -> PolicyParams:
    return PolicyParams(spec, [np.zeros(s) for s in spec.shapes()])


# ----------------------------------------------------------------- distribution
@dataclass
class Distribution:
    """Per-observation action distribution; ``outputs`` holds raw head outputs."""

    spec: PolicySpec
    outputs: np.ndarray  # (N, out_dim): gaussian means and categorical logits
    log_std: np.ndarray  # (n_gauss,)
    cache: tuple | None = None  # forward activations for backprop

    def __len__(self):
        return self.outputs.shape[0]

    def head_slices(self):
        """Yield (head, output slice, action slice, log_std slice)."""
        o = a = g = 0
        for h in self.spec.heads:
            os_ = slice(o, o + h.out_width)
            as_ = slice(a, a + h.action_width)
            gs = slice(g, g + h.size) if h.kind == "gaussian" else None
            yield h, os_, as_, gs
            o += h.out_width
            a += h.action_width
            if h.kind == "gaussian":
                g += h.size

    def probs(self, head_index: int) -> np.ndarray:
        for k, (h, os_, _, _) in enumerate(self.head_slices()):
            if k == head_index:
                if h.kind != "categorical":
                    raise ContractViolation("probabilities exist for categorical heads only")
                return _softmax(self.outputs[:, os_])
        raise IndexError(head_index)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _as_batch(params: PolicyParams, obs) -> np.ndarray:
    x = np.asarray(obs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.in_dim:
        raise ContractViolation(
            f"observation width {x.shape[-1]} != policy input {params.spec.in_dim}")
    return x


def forward(params: PolicyParams, obs) -> Distribution:
    x = _as_batch(params, obs)
    h1 = np.tanh(x @ params.W1 + params.b1)
    h2 = np.tanh(h1 @ params.W2 + params.b2)
    out = h2 @ params.W3 + params.b3
    return Distribution(params.spec, out, params.log_std.copy(), (x, h1, h2))


def sample(dist: Distribution, rng: np.random.Generator) -> np.ndarray:
    """Draw one action per row; Gaussian draws are not clipped here."""
    n = len(dist)
    return sample_with(dist, rng.standard_normal((n, dist.spec.n_gauss)),
                       rng.random((n, len(dist.spec.heads))))


def sample_with(dist: Distribution, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sample from pre-drawn noise: ``z`` (N, n_gauss) standard normals and
    ``u`` (N, n_heads) uniforms in [0, 1), one column per head."""
    n = len(dist)
    act = np.empty((n, dist.spec.action_dim))
    for k, (h, os_, as_, gs) in enumerate(dist.head_slices()):
        out = dist.outputs[:, os_]
        if h.kind == "gaussian":
            std = np.exp(dist.log_std[gs])
            act[:, as_] = out + std * z[:, gs]
        else:
            c = np.cumsum(_softmax(out), axis=1)
            idx = (u[:, k][:, None] >= c).sum(axis=1)
            act[:, as_.start] = np.minimum(idx, h.size - 1)
    return act


def mode(dist: Distribution) -> np.ndarray:
    """Most likely action (Gaussian mean, categorical argmax)."""
    act = np.empty((len(dist), dist.spec.action_dim))
    for h, os_, as_, _ in dist.head_slices():
        z = dist.outputs[:, os_]
        if h.kind == "gaussian":
            act[:, as_] = z
        else:
            act[:, as_.start] = np.argmax(z, axis=1)
    return act


def _cat_index(actions, as_, size):
    a = actions[:, as_.start]
    idx = a.astype(np.int64)
    if np.any(idx != a) or np.any(idx < 0) or np.any(idx >= size):
        raise ContractViolation("categorical action outside its support")
    return idx


def head_log_probs(dist: Distribution, actions) -> np.ndarray:
    """(N, n_heads) log-probabilities of each head's component of ``actions``."""
    actions = np.asarray(actions, dtype=np.float64).reshape(len(dist), -1)
    if actions.shape[1] != dist.spec.action_dim:
        raise ContractViolation("action width does not match the policy heads")
    out = np.empty((len(dist), len(dist.spec.heads)))
    for k, (h, os_, as_, gs) in enumerate(dist.head_slices()):
        z = dist.outputs[:, os_]
        if h.kind == "gaussian":
            ls = dist.log_std[gs]
            u = (actions[:, as_] - z) / np.exp(ls)
            out[:, k] = np.sum(-0.5 * u * u - ls - 0.5 * _LOG_2PI, axis=1)
        else:
            idx = _cat_index(actions, as_, h.size)
            out[:, k] = _log_softmax(z)[np.arange(len(dist)), idx]
    return out


def log_prob(dist: Distribution, actions) -> np.ndarray:
    """Joint log-probability per row (sum over heads)."""
    return head_log_probs(dist, actions).sum(axis=1)


def kl(p: Distribution, q: Distribution) -> np.ndarray:
    """KL(p || q) per row, summed over heads."""
    if p.spec.heads != q.spec.heads or len(p) != len(q):
        raise ContractViolation("distributions have different structure")
    total = np.zeros(len(p))
    for (h, os_, _, gs) in p.head_slices():
        zp, zq = p.outputs[:, os_], q.outputs[:, os_]
        if h.kind == "gaussian":
            lp, lq = p.log_std[gs], q.log_std[gs]
            vp, vq = np.exp(2 * lp), np.exp(2 * lq)
            total += np.sum(lq - lp + (vp + (zp - zq) ** 2) / (2 * vq) - 0.5, axis=1)
        else:
            lp, lq = _log_softmax(zp), _log_softmax(zq)
            total += np.sum(np.exp(lp) * (lp - lq), axis=1)
    return total


def entropy(dist: Distribution) -> np.ndarray:
    total = np.zeros(len(dist))
    for h, os_, _, gs in dist.head_slices():
        if h.kind == "gaussian":
            total += np.sum(dist.log_std[gs] + 0.5 * (_LOG_2PI + 1.0))
        else:
            lp = _log_softmax(dist.outputs[:, os_])
            total -= np.sum(np.exp(lp) * lp, axis=1)
    return total


# -------------------------------------------------------------------- gradients
def _backward(params: PolicyParams, cache, g_out, g_logstd) -> np.ndarray:
    """Reverse pass: flat gradient given d/d(outputs) and d/d(log_std)."""
    x, h1, h2 = cache
    gW3 = h2.T @ g_out
    gb3 = g_out.sum(axis=0)
    gz2 = (g_out @ params.W3.T) * (1.0 - h2 * h2)
    gW2 = h1.T @ gz2
    gb2 = gz2.sum(axis=0)
    gz1 = (gz2 @ params.W2.T) * (1.0 - h1 * h1)
    gW1 = x.T @ gz1
    gb1 = gz1.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2, gW3.ravel(), gb3, g_logstd])


def grad_log_prob(params: PolicyParams, obs, actions, weights=None) -> np.ndarray:
    """Gradient of sum_n w_n * log pi(a_n | o_n) with respect to the flat parameters."""
    dist = forward(params, obs)
    n = len(dist)
    actions = np.asarray(actions, dtype=np.float64).reshape(n, -1)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)
    g_out = np.zeros_like(dist.outputs)
    g_ls = np.zeros(params.spec.n_gauss)
    for h, os_, as_, gs in dist.head_slices():
        z = dist.outputs[:, os_]
        if h.kind == "gaussian":
            std = np.exp(dist.log_std[gs])
            u = (actions[:, as_] - z) / std
            g_out[:, os_] = w[:, None] * u / std
            g_ls[gs] = np.sum(w[:, None] * (u * u - 1.0), axis=0)
        else:
            idx = _cat_index(actions, as_, h.size)
            g = -_softmax(z)
            g[np.arange(n), idx] += 1.0
            g_out[:, os_] = w[:, None] * g
    return _backward(params, dist.cache, g_out, g_ls)


def _jvp(params: PolicyParams, cache, v: PolicyParams):
    """Forward-mode derivative of (outputs, log_std) along direction ``v``."""
    x, h1, h2 = cache
    dz1 = x @ v.W1 + v.b1
    dh1 = (1.0 - h1 * h1) * dz1
    dz2 = dh1 @ params.W2 + h1 @ v.W2 + v.b2
    dh2 = (1.0 - h2 * h2) * dz2
    dout = dh2 @ params.W3 + h2 @ v.W3 + v.b3
    return dout, v.log_std


def fisher_vector_product(params: PolicyParams, obs, vec, damping: float = 0.0,
                          dist: Distribution | None = None) -> np.ndarray:
    """(H + damping I) vec, H the Hessian of the mean KL(pi_params || pi) at pi = pi_params."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (params.spec.n_params,):
        raise ContractViolation("vector length does not match parameter count")
    dist = dist or forward(params, obs)
    n = len(dist)
    v = unflatten(params.spec, vec)
    dout, dls = _jvp(params, dist.cache, v)
    m_out = np.zeros_like(dout)
    m_ls = np.zeros(params.spec.n_gauss)
    for h, os_, _, gs in dist.head_slices():
        if h.kind == "gaussian":
            m_out[:, os_] = dout[:, os_] * np.exp(-2.0 * dist.log_std[gs])
            m_ls[gs] = 2.0 * dls[gs] * n
        else:
            p = _softmax(dist.outputs[:, os_])
            d = dout[:, os_]
            m_out[:, os_] = p * d - p * np.sum(p * d, axis=1, keepdims=True)
    g = _backward(params, dist.cache, m_out, m_ls)
    return g / n + damping * vec


# ------------------------------------------------------------------- checkpoint
def save_checkpoint(path, params: PolicyParams, obs_scale=None, meta: dict | None = None):
    """Write a versioned ``.npz`` checkpoint (see README for the layout)."""
    spec = params.spec
    scale = np.ones(spec.in_dim) if obs_scale is None else np.asarray(obs_scale, dtype=np.float64)
    np.savez(
        path,
        format_version=np.array(CHECKPOINT_VERSION),
        params=flatten(params),
        layout=np.array(json.dumps(spec.layout(), sort_keys=True)),
        obs_dim=np.array(spec.in_dim),
        obs_scale=scale,
        meta=np.array(json.dumps(meta or {}, sort_keys=True)),
    )


def load_checkpoint(path):
    """Returns (params, obs_scale, meta)."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {version}")
        spec = PolicySpec.from_layout(json.loads(str(z["layout"])))
        if int(z["obs_dim"]) != spec.in_dim:
            raise ContractViolation("checkpoint observation width is inconsistent")
        params = unflatten(spec, z["params"])
        return params, z["obs_scale"].copy(), json.loads(str(z["meta"]))


def policy_spec_for(system, n_values: int, n_presence: int, lanes: int = 2) -> PolicySpec:
    """Network layout used for a traffic system."""
    from .sim.network import System

    system = System.parse(system)
    if system in (System.SINGLE_RING, System.FIGURE_EIGHT):
        heads = (Head("gaussian", 1),)
    elif system is System.DOUBLE_RING:
        heads = (Head("gaussian", 1), Head("categorical", lanes))
    else:
        heads = (Head("categorical", 3),)
    return PolicySpec(n_values + n_presence, heads)


def to_agent_action(spec: PolicySpec, row):
    """Convert one action row to an ``AgentAction``.

    Layouts: (accel,), (accel, lane) or (bang index,).
    """
    from .env.core import AgentAction

    kinds = [h.kind for h in spec.heads]
    if kinds == ["gaussian"]:
        return AgentAction(float(row[0]))
    if kinds == ["gaussian", "categorical"]:
        return AgentAction(float(row[0]), int(row[1]))
    if kinds == ["categorical"]:
        return AgentAction(int(row[0]))
    raise ContractViolation(f"no action mapping for heads {kinds}")
