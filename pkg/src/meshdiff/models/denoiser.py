"""Toy token denoiser with hand-written backward pass.

One token per vertex: ``[vertex-ID embedding | step embedding | xyz]``. The
tokens pass through a residual self-attention layer over vertices, a residual
cross-attention layer onto the context tokens, a residual SiLU feed-forward
block and a final linear map to three coordinates. Everything is batched over
a leading axis; ``k`` may be a scalar or one step per batch element.

With ``output="velocity"`` the final map is read as ``v`` and the noise is
returned as ``sqrt(1 - a_k) h_k + sqrt(a_k) v``. The one-jump estimate is then
``sqrt(a_k) h_k - sqrt(1 - a_k) v``, which stays bounded as ``a_k -> 0``; a raw
noise head multiplies its error by ``1 / sqrt(a_k)`` there.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

OUTPUTS = ("epsilon", "velocity")
PARAM_ORDER = (
    "E_id",
    "Wq", "Wk", "Wv", "Wo",
    "Wq2", "Wk2", "Wv2", "Wo2",
    "W1", "b1", "W2", "b2",
    "Wout", "bout",
)  # fmt: skip


@dataclass(frozen=True)
class DenoiserConfig:
    V: int
    d_id: int = 16
    d_step: int = 15
    d_ctx: int = 8
    d_attn: int = 16
    d_ff: int = 64
    K: int = 200
    output: str = "epsilon"
    alpha_first: float = 0.9999
    alpha_last: float = 1e-4

    def __post_init__(self):
        if self.output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}, got {self.output!r}")

    def alphas(self) -> np.ndarray:
        # same linear schedule as diffusion.build_schedule
        return np.concatenate([[1.0], np.linspace(self.alpha_first, self.alpha_last, self.K)])

    @property
    def width(self) -> int:
        return self.d_id + self.d_step + 3


def step_embedding(k, d_step: int, K: int) -> np.ndarray:
    """Sinusoidal code of the step index; an odd width gets a trailing ``k / K`` channel."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = d_step // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / max(half, 1)))
    ang = k[:, None] * freqs[None, :]
    parts = [np.sin(ang), np.cos(ang)]
    if d_step % 2:
        parts.append(k[:, None] / K)
    return np.concatenate(parts, axis=1)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_back(A, dA):
    return A * (dA - np.sum(dA * A, axis=-1, keepdims=True))


def _silu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def _t(x):
    return np.swapaxes(x, -1, -2)


class TokenDenoiser:
    def __init__(self, config: DenoiserConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self._alphas = config.alphas()
        self.params = params if params is not None else self.init_params(config, seed)
        shapes = self.param_shapes(config)
        for name in PARAM_ORDER:
            if self.params[name].shape != shapes[name]:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shapes[name]}")

    @staticmethod
    def param_shapes(c: DenoiserConfig) -> dict:
        d, a = c.width, c.d_attn
        return {
            "E_id": (c.V, c.d_id),
            "Wq": (d, a), "Wk": (d, a), "Wv": (d, a), "Wo": (a, d),
            "Wq2": (d, a), "Wk2": (c.d_ctx, a), "Wv2": (c.d_ctx, a), "Wo2": (a, d),
            "W1": (d, c.d_ff), "b1": (c.d_ff,), "W2": (c.d_ff, d), "b2": (d,),
            "Wout": (d, 3), "bout": (3,),
        }  # fmt: skip

    @classmethod
    def init_params(cls, c: DenoiserConfig, seed: int = 0) -> dict:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.param_shapes(c).items():
            if name.startswith("b"):
                params[name] = np.zeros(shape)
            elif name == "E_id":
                params[name] = rng.standard_normal(shape)
            else:
                params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        return params

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def describe(self) -> dict:
        return {**asdict(self.config), "width": self.config.width, "num_params": self.num_params}

    # -- forward / backward -------------------------------------------------

    def _context(self, context, B):
        if context is None:
            raise ValueError("TokenDenoiser needs a context feature")
        C = np.asarray(context, dtype=np.float64)
        if C.ndim == 2:
            C = np.broadcast_to(C, (B,) + C.shape)
        if C.shape[0] != B or C.shape[-1] != self.config.d_ctx:
            raise ValueError(f"context shape {C.shape} incompatible with batch {B}, d_ctx {self.config.d_ctx}")
        return C

    def forward(self, hk, k, context):
        """Return ``(eps, cache)``; ``hk`` is ``(V, 3)`` or ``(B, V, 3)``."""
        p, c = self.params, self.config
        hk = np.asarray(hk, dtype=np.float64)
        single = hk.ndim == 2
        h = hk[None] if single else hk
        B, V, _ = h.shape
        if V != c.V:
            raise ValueError(f"model built for {c.V} vertices, got {V}")
        C = self._context(context, B)
        e_k = step_embedding(k, c.d_step, c.K)
        e_k = np.broadcast_to(e_k, (B, c.d_step)) if e_k.shape[0] == 1 else e_k
        X0 = np.concatenate(
            [np.broadcast_to(p["E_id"], (B, V, c.d_id)), np.broadcast_to(e_k[:, None, :], (B, V, c.d_step)), h],
            axis=-1,
        )
        scale = 1.0 / np.sqrt(c.d_attn)

        Q, Kt, Vv = X0 @ p["Wq"], X0 @ p["Wk"], X0 @ p["Wv"]
        A = _softmax(Q @ _t(Kt) * scale)
        O = A @ Vv
        X1 = X0 + O @ p["Wo"]

        Q2, K2, V2 = X1 @ p["Wq2"], C @ p["Wk2"], C @ p["Wv2"]
        A2 = _softmax(Q2 @ _t(K2) * scale)
        O2 = A2 @ V2
        X2 = X1 + O2 @ p["Wo2"]

        Hp = X2 @ p["W1"] + p["b1"]
        Hs, sig = _silu(Hp)
        X3 = X2 + Hs @ p["W2"] + p["b2"]

        eps = X3 @ p["Wout"] + p["bout"]
        a = None
        if c.output == "velocity":
            a = np.broadcast_to(self._alphas[np.atleast_1d(np.asarray(k))], (B,))[:, None, None]
            eps = np.sqrt(1.0 - a) * h + np.sqrt(a) * eps
        cache = dict(single=single, a=a, C=C, X0=X0, Q=Q, Kt=Kt, Vv=Vv, A=A, O=O, X1=X1,
                     Q2=Q2, K2=K2, V2=V2, A2=A2, O2=O2, X2=X2, Hp=Hp, Hs=Hs, sig=sig, X3=X3)  # fmt: skip
        return (eps[0] if single else eps), cache

    def backward(self, cache, d_eps, need_params: bool = True):
        """Return ``(d_hk, param_grads)`` for cotangent ``d_eps`` on the output."""
        p, c = self.params, self.config
        d_eps = np.asarray(d_eps, dtype=np.float64)
        dY = d_eps[None] if cache["single"] else d_eps
        a = cache["a"]
        if a is not None:
            d_skip = np.sqrt(1.0 - a) * dY
            dY = np.sqrt(a) * dY
        scale = 1.0 / np.sqrt(c.d_attn)
        g = {}

        def acc(x, dy):  # sum over batch of x^T dy
            return np.einsum("bvi,bvj->ij", x, dy)

        X3 = cache["X3"]
        if need_params:
            g["Wout"] = acc(X3, dY)
            g["bout"] = dY.sum(axis=(0, 1))
        dX3 = dY @ p["Wout"].T

        dHs = dX3 @ p["W2"].T
        Hp, sig = cache["Hp"], cache["sig"]
        dHp = dHs * (sig * (1.0 + Hp * (1.0 - sig)))
        if need_params:
            g["W2"] = acc(cache["Hs"], dX3)
            g["b2"] = dX3.sum(axis=(0, 1))
            g["W1"] = acc(cache["X2"], dHp)
            g["b1"] = dHp.sum(axis=(0, 1))
        dX2 = dX3 + dHp @ p["W1"].T

        A2, V2, Q2, K2, C = cache["A2"], cache["V2"], cache["Q2"], cache["K2"], cache["C"]
        dO2 = dX2 @ p["Wo2"].T
        dS2 = _softmax_back(A2, dO2 @ _t(V2)) * scale
        dQ2 = dS2 @ K2
        if need_params:
            g["Wo2"] = acc(cache["O2"], dX2)
            dV2 = _t(A2) @ dO2
            dK2 = _t(dS2) @ Q2
            g["Wq2"] = acc(cache["X1"], dQ2)
            g["Wk2"] = np.einsum("bmi,bmj->ij", C, dK2)
            g["Wv2"] = np.einsum("bmi,bmj->ij", C, dV2)
        dX1 = dX2 + dQ2 @ p["Wq2"].T

        A, Vv, Q, Kt, X0 = cache["A"], cache["Vv"], cache["Q"], cache["Kt"], cache["X0"]
        dO = dX1 @ p["Wo"].T
        dS = _softmax_back(A, dO @ _t(Vv)) * scale
        dQ = dS @ Kt
        dK = _t(dS) @ Q
        dVv = _t(A) @ dO
        if need_params:
            g["Wo"] = acc(cache["O"], dX1)
            g["Wq"] = acc(X0, dQ)
            g["Wk"] = acc(X0, dK)
            g["Wv"] = acc(X0, dVv)
        dX0 = dX1 + dQ @ p["Wq"].T + dK @ p["Wk"].T + dVv @ p["Wv"].T

        if need_params:
            g["E_id"] = dX0[..., : c.d_id].sum(axis=0)
        d_h = dX0[..., -3:]
        if a is not None:
            d_h = d_h + d_skip
        return (d_h[0] if cache["single"] else d_h), g

    # -- ScoreModel interface ---------------------------------------------

    def evaluate(self, hk, k, context=None):
        return self.forward(hk, k, context)[0]

    def vjp(self, hk, k, context, cotangent):
        _, cache = self.forward(hk, k, context)
        return self.backward(cache, cotangent, need_params=False)[0]

    def copy(self) -> "TokenDenoiser":
        return TokenDenoiser(self.config, {k: v.copy() for k, v in self.params.items()})
