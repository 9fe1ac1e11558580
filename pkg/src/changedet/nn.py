"""Dense-tensor NN kernels: conv, dense, ReLU, softmax, weighted CE, Adam.

Just the fixed layer vocabulary the two patch classifiers need, written as
pure functions over numpy arrays. Convolution uses the cross-correlation
convention (no kernel flip), valid padding, stride 1; the heavy lifting is
an im2col reshape followed by a single GEMM, so forward/backward run at
BLAS speed. Training runs in float32; gradient checking must run in
float64 because central differences are unreliable in single precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = 1e-12


def _window_view(x: np.ndarray, k: int) -> np.ndarray:
    """(B, H, W, C) -> read-only view (B, H-k+1, W-k+1, k, k, C)."""
    b, h, w, c = x.shape
    sb, sh, sw, sc = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(b, h - k + 1, w - k + 1, k, k, c),
        strides=(sb, sh, sw, sh, sw, sc), writeable=False)


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ValueError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    win = _window_view(x, k)
    b, oh, ow = win.shape[:3]
    return win.reshape(b * oh * ow, k * k * x.shape[3])


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation: out(y,x,o) = b(o) + sum in(y+dy,x+dx,c) k(dy,dx,c,o)."""
    out, _ = conv2d_forward_cached(x, kernel, bias)
    return out


def conv2d_forward_cached(x: np.ndarray, kernel: np.ndarray,
                          bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """conv2d_forward that also returns the im2col matrix for backward reuse."""
    x, squeeze = _as_batch(x, 3)
    k, _, cin, cout = kernel.shape
    if x.shape[1] < k or x.shape[2] < k:
        raise ValueError(f"input {x.shape[1]}x{x.shape[2]} smaller than kernel {k}x{k}")
    if x.shape[3] != cin:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    col = _im2col(x, k)
    out = col @ kernel.reshape(k * k * cin, cout) + bias
    out = out.reshape(x.shape[0], x.shape[1] - k + 1, x.shape[2] - k + 1, cout)
    return (out[0] if squeeze else out), col


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray,
                    col: np.ndarray | None = None,
                    need_grad_input: bool = True,
                    ) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Exact gradients of conv2d_forward w.r.t. input, kernel and bias.

    Passing the cached im2col matrix avoids recomputing it; callers that do
    not consume the input gradient (the first layer of a net) can skip its
    computation entirely with need_grad_input=False.
    """
    x, squeeze = _as_batch(x, 3)
    grad_out, _ = _as_batch(grad_out, 3)
    k, _, cin, cout = kernel.shape
    b, oh, ow = x.shape[0], x.shape[1] - k + 1, x.shape[2] - k + 1
    if grad_out.shape != (b, oh, ow, cout):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match "
                         f"forward output {(b, oh, ow, cout)}")
    if col is None:
        col = _im2col(x, k)
    g2 = grad_out.reshape(b * oh * ow, cout)
    grad_kernel = (col.T @ g2).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0)
    if not need_grad_input:
        return None, grad_kernel, grad_bias
    # grad wrt input: full correlation with the spatially flipped, transposed kernel
    gp = np.pad(grad_out, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    flipped = np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2))
    colg = _im2col(gp, k)
    grad_x = (colg @ flipped.reshape(k * k * cout, cin)).reshape(x.shape)
    if squeeze:
        return grad_x[0], grad_kernel, grad_bias
    return grad_x, grad_kernel, grad_bias


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x, squeeze = _as_batch(x, 1)
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"input width {x.shape[1]} does not match weight rows {weight.shape[0]}")
    out = x @ weight + bias
    return out[0] if squeeze else out


def dense_backward(x: np.ndarray, weight: np.ndarray,
                   grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, squeeze = _as_batch(x, 1)
    grad_out, _ = _as_batch(grad_out, 1)
    if grad_out.shape != (x.shape[0], weight.shape[1]):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match "
                         f"output {(x.shape[0], weight.shape[1])}")
    grad_x = grad_out @ weight.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return (grad_x[0], grad_w, grad_b) if squeeze else (grad_x, grad_w, grad_b)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is defined as 0
    return np.where(x > 0, grad_out, 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (max-subtracted)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(probs: np.ndarray, labels: np.ndarray,
                           weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example weighted CE and its gradient w.r.t. the logits.

    probs must come from softmax; the gradient is taken jointly through it:
    grad_logits = w_label * (p - onehot). weights is indexed by label
    (0 = no change, 1 = change); (1, 1) recovers the unweighted loss.
    """
    probs, squeeze = _as_batch(probs, 1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    w = np.asarray(weights, dtype=probs.dtype)[labels]
    n = probs.shape[0]
    p_label = probs[np.arange(n), labels]
    loss = -w * np.log(p_label + LOG_FLOOR)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= w[:, None]
    return (loss[0], grad[0]) if squeeze else (loss, grad)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
               dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected adaptive-moment state, one accumulator pair per parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One in-place Adam update; deterministic given (params, grads, state)."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} shape {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    for name, p in params.items():
        p -= lr * grads[name]


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerGradCheck:
    param: str
    n_checked: int
    n_excluded: int
    max_rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    layers: list[LayerGradCheck]
    min_abs_relu_input: float

    @property
    def max_rel_err(self) -> float:
        return max(l.max_rel_err for l in self.layers)

    @property
    def n_excluded(self) -> int:
        return sum(l.n_excluded for l in self.layers)

    def passes(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance


def _sample_indices(rng: np.random.Generator, size: int, budget: int) -> np.ndarray:
    if budget >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=budget, replace=False))


def grad_check(net, patch_a: np.ndarray, patch_b: np.ndarray, label: int,
               class_weights: np.ndarray | None = None, h: float = 1e-5,
               sample_cap: int = 10_000, seed: int = 0,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Central-difference check of every parameter gradient of a network.

    Above sample_cap total parameters, a seed-deterministic subsample is
    checked instead, spread across layers proportionally to their size
    (at least 16 entries per parameter tensor). The network must be built
    in float64; relative error uses max(|analytic|, |numeric|, 1e-8) as
    denominator.

    Near-kink exclusion: central differences are invalid for a parameter
    whose +/-h evaluations land on different sides of a ReLU kink (only
    pre-activations within ~h of zero can flip). Parameters that exceed
    the tolerance are re-examined; if their ReLU activity pattern differs
    between the two perturbed forwards they are counted as excluded
    instead of failed.
    """
    if class_weights is None:
        class_weights = np.ones(2)
    params = net.params
    if any(p.dtype != np.float64 for p in params.values()):
        raise ValueError("gradient checking requires a float64 network; "
                         "use Network.astype(np.float64)")
    a, b = patch_a[None], patch_b[None]
    labels = np.array([label])
    grads = net.loss_and_grads(a, b, labels, class_weights).grads
    min_relu = net.min_abs_relu_input(a, b)

    def loss_at() -> float:
        return float(net.loss(a, b, labels, class_weights))

    total = sum(p.size for p in params.values())
    rng = np.random.default_rng([seed, total])
    layers = []
    for name, p in sorted(params.items()):
        if total <= sample_cap:
            budget = p.size
        else:
            budget = min(p.size, max(16, int(round(sample_cap * p.size / total))))
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        worst = 0.0
        excluded = 0
        idx = _sample_indices(rng, p.size, budget)
        for i in idx:
            saved = flat[i]
            flat[i] = saved + h
            f_plus = loss_at()
            flat[i] = saved - h
            f_minus = loss_at()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            err = abs(analytic - numeric) / denom
            if err >= tolerance:
                flat[i] = saved + h
                act_plus = net.relu_activity(a, b)
                flat[i] = saved - h
                act_minus = net.relu_activity(a, b)
                flat[i] = saved
                if np.any(act_plus != act_minus):
                    excluded += 1
                    continue
            worst = max(worst, err)
        layers.append(LayerGradCheck(param=name, n_checked=len(idx),
                                     n_excluded=excluded, max_rel_err=worst))
    return GradCheckReport(layers=layers, min_abs_relu_input=min_relu)
