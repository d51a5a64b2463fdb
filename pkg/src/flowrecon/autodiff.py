"""Small tanh MLPs with exact input derivatives and parameter gradients.

Each layer carries up to five streams for a batch of points: the value, the
first directional derivatives along x and y, and the second directional
derivatives along x and y.  The Laplacian is the sum of the last two.  The
parameter gradient of any loss built from those streams is obtained by
reverse accumulation through the same extended computation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_HIDDEN = (20,) * 8

# number of propagated streams for derivative order 0, 1, 2
_N_STREAMS = {0: 1, 1: 3, 2: 5}


class NonFiniteLossError(FloatingPointError):
    """A loss or gradient evaluated to NaN or infinity."""


@dataclass(frozen=True)
class EvalWithDerivs:
    value: np.ndarray  # (N, out)
    jacobian: np.ndarray | None = None  # (N, out, 2)
    laplacian: np.ndarray | None = None  # (N, out)


class Mlp:
    """Fully connected network ``R^2 -> R^out`` with tanh hidden layers.

    Inputs are mapped by a fixed affine normalization ``(x - in_shift) *
    in_scale`` and outputs multiplied by ``out_scale``; neither is trained.
    All trainable parameters live in the flat vector ``params``; per-layer
    weights and biases are views into it.
    """

    activation = "tanh"

    def __init__(self, layer_sizes, seed=0, in_shift=(0.0, 0.0), in_scale=(1.0, 1.0), out_scale=1.0,
                 params=None):
        self.layer_sizes = [int(n) for n in layer_sizes]
        if len(self.layer_sizes) < 2 or self.layer_sizes[0] != 2:
            raise ValueError(f"layer sizes must start with input width 2, got {layer_sizes}")
        self.seed = seed
        self.in_shift = np.asarray(in_shift, dtype=np.float64)
        self.in_scale = np.asarray(in_scale, dtype=np.float64)
        self.out_scale = float(out_scale)

        self._slices = []
        offset = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + n_in * n_out)
            offset += n_in * n_out
            b = slice(offset, offset + n_out)
            offset += n_out
            self._slices.append((w, b, n_in, n_out))
        self.n_params = offset

        if params is None:
            params = self._glorot(np.random.default_rng(seed))
        params = np.array(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.params = params

    @classmethod
    def default(cls, out: int, seed=0, **kw) -> "Mlp":
        return cls([2, *DEFAULT_HIDDEN, out], seed=seed, **kw)

    def _glorot(self, rng):
        p = np.zeros(self.n_params)
        for w, _, n_in, n_out in self._slices:
            lim = np.sqrt(6.0 / (n_in + n_out))
            p[w] = rng.uniform(-lim, lim, size=n_in * n_out)
        return p

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.seed, self.in_shift, self.in_scale, self.out_scale,
                   self.params.copy())

    def layers(self):
        """Yield ``(W, b)`` views, ``W`` of shape ``(n_in, n_out)``."""
        for w, b, n_in, n_out in self._slices:
            yield self.params[w].reshape(n_in, n_out), self.params[b]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    # -- evaluation ---------------------------------------------------------

    def _propagate(self, x, order):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = len(x)
        S = np.zeros((_N_STREAMS[order], n, 2))
        S[0] = (x - self.in_shift) * self.in_scale
        if order >= 1:
            S[1, :, 0] = self.in_scale[0]
            S[2, :, 1] = self.in_scale[1]
        tape = []
        n_layers = len(self._slices)
        for li, (W, b) in enumerate(self.layers()):
            Z = S @ W
            Z[0] += b
            if li == n_layers - 1:
                tape.append((S, None, None, None))
                S = Z
                break
            a = np.tanh(Z[0])
            s1 = 1.0 - a * a
            out = np.empty_like(Z)
            out[0] = a
            if order >= 1:
                out[1:3] = s1 * Z[1:3]
            s2 = None
            if order >= 2:
                s2 = -2.0 * a * s1
                out[3:5] = s2 * Z[1:3] ** 2 + s1 * Z[3:5]
            tape.append((S, Z, a, (s1, s2)))
            S = out
        return S * self.out_scale, tape

    def forward(self, x) -> np.ndarray:
        """Network outputs at ``x`` (N, 2) -> (N, out)."""
        return self._propagate(x, 0)[0][0]

    def forward_with_derivs(self, x, order: int = 2) -> EvalWithDerivs:
        return self._pack(self._propagate(x, order)[0], order)

    @staticmethod
    def _pack(S, order):
        if order == 0:
            return EvalWithDerivs(S[0])
        jac = np.stack([S[1], S[2]], axis=-1)
        lap = S[3] + S[4] if order >= 2 else None
        return EvalWithDerivs(S[0], jac, lap)

    def eval_and_tape(self, x, order: int = 2):
        S, tape = self._propagate(x, order)
        return self._pack(S, order), (tape, order)

    def backward(self, tape_order, grad: EvalWithDerivs) -> np.ndarray:
        """Parameter gradient given loss gradients w.r.t. the reported outputs."""
        tape, order = tape_order
        G = np.zeros((_N_STREAMS[order],) + grad.value.shape)
        G[0] = grad.value
        if order >= 1 and grad.jacobian is not None:
            G[1] = grad.jacobian[..., 0]
            G[2] = grad.jacobian[..., 1]
        if order >= 2 and grad.laplacian is not None:
            G[3] = grad.laplacian
            G[4] = grad.laplacian
        G = G * self.out_scale

        out = np.zeros(self.n_params)
        layers = list(self.layers())
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            S, Z, a, s = tape[li]
            if Z is not None:
                G = self._tanh_backward(G, Z, a, s, order)
            w_sl, b_sl, n_in, n_out = self._slices[li]
            out[w_sl] = (S.reshape(-1, n_in).T @ G.reshape(-1, n_out)).ravel()
            out[b_sl] = G[0].sum(axis=0)
            if li > 0:
                G = G @ W.T
        return out

    @staticmethod
    def _tanh_backward(G, Z, a, s, order):
        s1, s2 = s
        gZ = np.empty_like(G)
        g_s1 = 0.0
        g_s2 = 0.0
        if order >= 2:
            gZ[3:5] = G[3:5] * s1
            g_s1 = np.sum(G[3:5] * Z[3:5], axis=0)
            g_s2 = np.sum(G[3:5] * Z[1:3] ** 2, axis=0)
        if order >= 1:
            gZ[1:3] = G[1:3] * s1
            if order >= 2:
                gZ[1:3] += 2.0 * G[3:5] * s2 * Z[1:3]
            g_s1 = g_s1 + np.sum(G[1:3] * Z[1:3], axis=0)
        # s1 = 1 - a^2, s2 = -2a + 2a^3
        g_a = G[0] - 2.0 * a * g_s1
        if order >= 2:
            g_a = g_a + (6.0 * a * a - 2.0) * g_s2
        gZ[0] = g_a * s1
        return gZ

    # -- serialization ------------------------------------------------------

    def header(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "seed": self.seed,
            "in_shift": self.in_shift.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_scale": self.out_scale,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header()).encode()
        return len(head).to_bytes(8, "little") + head + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Mlp":
        n = int.from_bytes(data[:8], "little")
        head = json.loads(data[8:8 + n])
        if head.get("activation") != cls.activation:
            raise ValueError(f"unsupported activation {head.get('activation')!r}")
        params = np.frombuffer(data[8 + n:], dtype="<f8").astype(np.float64)
        return cls(head["layer_sizes"], head["seed"], head["in_shift"], head["in_scale"],
                   head["out_scale"], params)


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def forward_with_derivs(net: Mlp, x, order: int = 2) -> EvalWithDerivs:
    return net.forward_with_derivs(x, order)


def loss_gradients(nets, points, loss, order: int = 2):
    """Evaluate ``loss`` on network outputs at ``points`` and return parameter gradients.

    ``nets`` is a single :class:`Mlp` or a sequence of them.  ``loss`` receives
    one :class:`EvalWithDerivs` per net and must return ``(value, grads)`` with
    ``grads`` a matching sequence of :class:`EvalWithDerivs` holding the loss
    gradient w.r.t. value, jacobian and laplacian.
    """
    single = isinstance(nets, Mlp)
    nets = [nets] if single else list(nets)
    evals, tapes = zip(*(net.eval_and_tape(points, order) for net in nets))
    value, grads = loss(*evals)
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss evaluated to {value}")
    if isinstance(grads, EvalWithDerivs):
        grads = [grads]
    out = [net.backward(t, g) for net, t, g in zip(nets, tapes, grads)]
    return float(value), (out[0] if single else out)


@dataclass
class OptimState:
    """Adaptive-moment optimizer state for one flat parameter vector."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(params: np.ndarray, grads: np.ndarray, state: OptimState) -> np.ndarray:
    """One bias-corrected Adam update; mutates and returns ``params``."""
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ValueError(f"optimizer state shape {state.m.shape} does not match {params.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
