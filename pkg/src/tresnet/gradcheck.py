"""Analytic backward rules for the TResNet layers and the focal loss, plus a
central finite-difference checker.

All checks run in float64. A layer is checked through the scalar
``sum(forward(inputs) * w)`` for a fixed random ``w``, so the analytic path is
exercised with ``grad_out = w``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .errors import DimensionError
from .layers import (
    PROB_CLAMP,
    IabnParams,
    SeParams,
    aa_downsample,
    asymmetric_focal_loss,
    blur_filter,
    depth_to_space,
    fast_gap,
    iabn,
    se_block,
    se_reduced_width,
    space_to_depth,
)
from .tensor import ConvParams, conv2d, leaky_relu, pad_reflect, sigmoid

Tensor = np.ndarray


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference(fn: Callable[[Tensor], float], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def _rel_error(a: Tensor, n: Tensor) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


@dataclass
class GradResult:
    name: str
    analytic: Dict[str, Tensor]
    numeric: Dict[str, Tensor]
    max_rel_error: float = 0.0
    max_abs_error: float = 0.0

    def __post_init__(self):
        rel = [float(_rel_error(self.analytic[k], self.numeric[k]).max()) for k in self.analytic]
        ab = [float(np.abs(self.analytic[k] - self.numeric[k]).max()) for k in self.analytic]
        self.max_rel_error = max(rel, default=0.0)
        self.max_abs_error = max(ab, default=0.0)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def check_gradients(name: str, forward: Callable[..., Tensor], backward: Callable[..., Dict[str, Tensor]],
                    inputs: Dict[str, Tensor], seed: int = 0, h: float = 1e-3,
                    difference_first: bool = False) -> GradResult:
    """Compare ``backward(grad_out=w, **inputs)`` with finite differences of ``sum(forward * w)``.

    ``backward`` returns a dict keyed like ``inputs`` (only the keys it
    returns are checked). ``difference_first`` subtracts the two perturbed
    outputs before contracting with ``w``; for pure data-movement maps with
    dyadic inputs and step this makes the numeric gradient exact.
    """
    if difference_first:
        return _check_difference_first(name, forward, backward, inputs, seed, h)
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    out = forward(**inputs)
    w = np.random.default_rng(seed + 7919).standard_normal(np.shape(out))
    analytic = backward(grad_out=w, **inputs)
    numeric = {}
    for key in analytic:
        def scalar(v, key=key):
            args = dict(inputs)
            args[key] = v
            return float(np.sum(forward(**args) * w))
        numeric[key] = finite_difference(scalar, inputs[key], h)
    return GradResult(name, analytic, numeric)


def _check_difference_first(name, forward, backward, inputs, seed, h):
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    w = np.random.default_rng(seed + 7919).standard_normal(np.shape(forward(**inputs)))
    analytic = backward(grad_out=w, **inputs)
    numeric = {}
    for key in analytic:
        x = inputs[key].copy()
        flat = x.reshape(-1)
        grad = np.zeros_like(x)
        g = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = forward(**dict(inputs, **{key: x}))
            flat[i] = orig - h
            fm = forward(**dict(inputs, **{key: x}))
            flat[i] = orig
            g[i] = np.sum(w * ((fp - fm) / (2 * h)))
        numeric[key] = grad
    return GradResult(name, analytic, numeric)


# ---------------------------------------------------------------------------
# adjoints of the primitives
# ---------------------------------------------------------------------------

def _reflect_pad_adjoint(gp: Tensor, pad: int) -> Tensor:
    """Fold gradients of a reflect-padded array back onto the unpadded one."""
    if pad == 0:
        return gp.copy()
    for axis in (2, 3):
        size = gp.shape[axis] - 2 * pad
        core = np.take(gp, np.arange(pad, pad + size), axis=axis).copy()
        for k in range(1, pad + 1):
            # padded index pad-k mirrors original index k; pad+size-1+k mirrors size-1-k
            lo = np.take(gp, pad - k, axis=axis)
            hi = np.take(gp, pad + size - 1 + k, axis=axis)
            idx_lo = [slice(None)] * 4
            idx_lo[axis] = k
            idx_hi = [slice(None)] * 4
            idx_hi[axis] = size - 1 - k
            core[tuple(idx_lo)] += lo
            core[tuple(idx_hi)] += hi
        gp = core
    return gp


def backward_conv2d(x: Tensor, p: ConvParams, grad_out: Tensor) -> Dict[str, Tensor]:
    """Gradients w.r.t. input, weight and (if present) bias."""
    x = np.asarray(x)
    w = p.weight.astype(x.dtype)
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    s, pad, groups = p.stride, p.padding, p.groups
    if p.padding_mode == "reflect":
        xp = pad_reflect(x, pad)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // s + 1
    wo = (wd + 2 * pad - kw) // s + 1
    if grad_out.shape != (n, o, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} inconsistent with conv output")
    og = o // groups
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for g in range(groups):
        gout = grad_out[:, g * og:(g + 1) * og]
        wg = w[g * og:(g + 1) * og]
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, g * cg:(g + 1) * cg, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                dw[g * og:(g + 1) * og, :, i, j] = np.einsum("nohw,nchw->oc", gout, patch)
                dxp[:, g * cg:(g + 1) * cg, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    np.einsum("nohw,oc->nchw", gout, wg[:, :, i, j])
    if p.padding_mode == "reflect":
        dx = _reflect_pad_adjoint(dxp, pad)
    else:
        dx = dxp[:, :, pad:pad + h, pad:pad + wd]
    grads = {"x": dx, "weight": dw}
    if p.bias is not None:
        grads["bias"] = grad_out.sum(axis=(0, 2, 3))
    return grads


def backward_linear(x: Tensor, weight: Tensor, grad_out: Tensor) -> Dict[str, Tensor]:
    return {"x": grad_out @ weight, "weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}


def backward_leaky_relu(x: Tensor, slope: float, grad_out: Tensor) -> Tensor:
    return np.where(x >= 0, grad_out, slope * grad_out)


def backward_sigmoid(y: Tensor, grad_out: Tensor) -> Tensor:
    """Gradient given the sigmoid *output* ``y``."""
    return grad_out * y * (1 - y)


# ---------------------------------------------------------------------------
# adjoints of the TResNet layers
# ---------------------------------------------------------------------------

def _expect_shape(grad_out: Tensor, shape, what: str) -> None:
    if tuple(np.shape(grad_out)) != tuple(shape):
        raise DimensionError(f"{what}: grad_out shape {tuple(np.shape(grad_out))} != expected {tuple(shape)}")


def backward_space_to_depth(grad_out: Tensor, block: int = 4) -> Tensor:
    """Adjoint of a permutation is its inverse: exact, no arithmetic."""
    return depth_to_space(grad_out, block)


def backward_gap(grad_out: Tensor, input_shape) -> Tensor:
    n, c, h, w = input_shape
    if np.size(grad_out) != n * c or np.ndim(grad_out) not in (2, 4):
        raise DimensionError(f"gap: grad_out shape {np.shape(grad_out)} does not match input {tuple(input_shape)}")
    g = np.asarray(grad_out).reshape(n, c, 1, 1)
    return np.broadcast_to(g / (h * w), (n, c, h, w)).copy()


def backward_aa(grad_out: Tensor, input_shape) -> Tensor:
    """Adjoint of reflect-pad(1) followed by the stride-2 depthwise blur."""
    n, c, h, w = input_shape
    _expect_shape(grad_out, (n, c, (h - 1) // 2 + 1, (w - 1) // 2 + 1), "aa_downsample")
    k = blur_filter(c).weight[0, 0].astype(grad_out.dtype)
    ho, wo = grad_out.shape[2:]
    gp = np.zeros((n, c, h + 2, w + 2), dtype=grad_out.dtype)
    for i in range(3):
        for j in range(3):
            gp[:, :, i:i + 2 * (ho - 1) + 1:2, j:j + 2 * (wo - 1) + 1:2] += k[i, j] * grad_out
    return _reflect_pad_adjoint(gp, 1)


def backward_iabn(x: Tensor, p: IabnParams, grad_out: Tensor) -> Dict[str, Tensor]:
    """Inference-mode IABN: running statistics are constants."""
    _expect_shape(grad_out, x.shape, "iabn")
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"iabn over {p.channels} channels got input {x.shape}")
    inv_std = 1.0 / np.sqrt(p.running_var.astype(np.float64) + p.eps)
    xhat = (x - p.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    z = p.gamma[None, :, None, None] * xhat + p.beta[None, :, None, None]
    dz = grad_out if p.slope is None else backward_leaky_relu(z, p.slope, grad_out)
    return {
        "x": dz * (p.gamma * inv_std)[None, :, None, None],
        "gamma": np.sum(dz * xhat, axis=(0, 2, 3)),
        "beta": np.sum(dz, axis=(0, 2, 3)),
    }


def backward_iabn_from_output(y: Tensor, p: IabnParams, grad_out: Tensor) -> Dict[str, Tensor]:
    """Same gradients as :func:`backward_iabn`, recovered from the output alone.

    This is what lets the forward overwrite its input: the activation is
    inverted (needs ``slope > 0``) and the affine map undone (needs
    ``gamma != 0``).
    """
    if p.slope is not None and p.slope <= 0:
        raise ValueError("output-based backward needs an invertible activation (slope > 0)")
    if np.any(p.gamma == 0):
        raise ValueError("output-based backward needs non-zero gamma")
    z = y if p.slope is None else np.where(y >= 0, y, y / p.slope)
    inv_std = 1.0 / np.sqrt(p.running_var.astype(np.float64) + p.eps)
    xhat = (z - p.beta[None, :, None, None]) / p.gamma[None, :, None, None]
    dz = grad_out if p.slope is None else np.where(z >= 0, grad_out, p.slope * grad_out)
    return {
        "x": dz * (p.gamma * inv_std)[None, :, None, None],
        "gamma": np.sum(dz * xhat, axis=(0, 2, 3)),
        "beta": np.sum(dz, axis=(0, 2, 3)),
    }


def iabn_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, slope: Optional[float] = 0.01) -> Tensor:
    """Batch-statistics IABN forward (standalone gradient checking only)."""
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    z = gamma[None, :, None, None] * (x - mu) / np.sqrt(var + eps) + beta[None, :, None, None]
    return z if slope is None else leaky_relu(z, slope)


def backward_iabn_train(x: Tensor, gamma: Tensor, beta: Tensor, grad_out: Tensor, eps: float = 1e-5,
                        slope: Optional[float] = 0.01) -> Dict[str, Tensor]:
    _expect_shape(grad_out, x.shape, "iabn_train")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    z = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    dz = grad_out if slope is None else backward_leaky_relu(z, slope, grad_out)
    dxhat = dz * gamma[None, :, None, None]
    sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = inv_std / m * (m * dxhat - sum_d - xhat * sum_dx)
    return {"x": dx, "gamma": np.sum(dz * xhat, axis=(0, 2, 3)), "beta": np.sum(dz, axis=(0, 2, 3))}


def backward_se(x: Tensor, p: SeParams, grad_out: Tensor) -> Dict[str, Tensor]:
    _expect_shape(grad_out, x.shape, "se_block")
    if x.shape[1] != p.channels:
        raise DimensionError(f"SE over {p.channels} channels got input {x.shape}")
    n, c, h, w = x.shape
    s = fast_gap(x, flatten=True)
    a = s @ p.w_reduce.T + p.b_reduce
    hid = np.maximum(a, 0)
    g = sigmoid(hid @ p.w_expand.T + p.b_expand)
    dg = np.sum(grad_out * x, axis=(2, 3))
    db = dg * g * (1 - g)
    dh = db @ p.w_expand
    da = dh * (a > 0)
    ds = da @ p.w_reduce
    return {
        "x": grad_out * g[:, :, None, None] + ds[:, :, None, None] / (h * w),
        "w_reduce": da.T @ s,
        "b_reduce": da.sum(axis=0),
        "w_expand": db.T @ hid,
        "b_expand": db.sum(axis=0),
    }


def backward_focal(pred_logits: Tensor, targets: Tensor, gamma_pos: float, gamma_neg: float,
                   grad_out: float = 1.0) -> Tensor:
    """d loss / d logits for :func:`~tresnet.layers.asymmetric_focal_loss`."""
    z = np.asarray(pred_logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise DimensionError(f"logits {z.shape} and targets {y.shape} differ")
    if np.ndim(grad_out) != 0:
        raise DimensionError("focal loss is scalar; grad_out must be a scalar")
    p_raw = sigmoid(z)
    p = np.clip(p_raw, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (p_raw > PROB_CLAMP) & (p_raw < 1 - PROB_CLAMP)
    d_pos = -y * (1 - p) ** gamma_pos * ((1 - p) - gamma_pos * p * np.log(p))
    d_neg = -(1 - y) * p ** gamma_neg * (gamma_neg * (1 - p) * np.log1p(-p) - p)
    return grad_out * np.where(inside, d_pos + d_neg, 0.0) / z.size


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

H_STEP = 1e-3
KINK_MARGIN = 10 * H_STEP


def _away_from_kink(rng, shape, value_fn, tries=200):
    """Draw N(0,1) arrays until ``value_fn(x)`` keeps every element out of the kink band."""
    for _ in range(tries):
        x = rng.standard_normal(shape)
        if np.all(np.abs(value_fn(x)) > KINK_MARGIN):
            return x
    raise RuntimeError("could not sample away from activation kink")


DYADIC_STEP = 2.0 ** -10  # ~1e-3, exactly representable


def suite_space_to_depth(shape, seed):
    rng = np.random.default_rng(seed)
    # dyadic values keep x +- h exact, so the permutation's error is exactly zero
    x = np.round(rng.standard_normal(shape) * 1024) / 1024
    return check_gradients(
        f"space_to_depth{shape}", lambda x: space_to_depth(x),
        lambda grad_out, x: {"x": backward_space_to_depth(grad_out)}, {"x": x}, seed, DYADIC_STEP,
        difference_first=True)


def suite_aa(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    return check_gradients(
        f"aa_downsample{shape}", lambda x: aa_downsample(x),
        lambda grad_out, x: {"x": backward_aa(grad_out, x.shape)}, {"x": x}, seed, H_STEP)


def suite_gap(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    return check_gradients(
        f"fast_gap{shape}", lambda x: fast_gap(x),
        lambda grad_out, x: {"x": backward_gap(grad_out, x.shape)}, {"x": x}, seed, H_STEP)


def _iabn_params(gamma, beta, mean, var, slope):
    return IabnParams(gamma, beta, mean, var, eps=1e-5, slope=slope)


def suite_iabn(shape, seed, slope=0.01):
    rng = np.random.default_rng(seed)
    c = shape[1]
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c) * 0.1
    mean = rng.standard_normal(c) * 0.1
    var = rng.uniform(0.5, 2.0, c)

    def pre_act(x):
        return gamma[None, :, None, None] * (x - mean[None, :, None, None]) / \
            np.sqrt(var + 1e-5)[None, :, None, None] + beta[None, :, None, None]

    x = _away_from_kink(rng, shape, pre_act)

    def fwd(x, gamma, beta):
        return iabn(x, _iabn_params(gamma, beta, mean, var, slope))

    def bwd(grad_out, x, gamma, beta):
        return backward_iabn(x, _iabn_params(gamma, beta, mean, var, slope), grad_out)

    return check_gradients(f"iabn{shape}", fwd, bwd, {"x": x, "gamma": gamma, "beta": beta}, seed, H_STEP)


def suite_iabn_train(shape, seed, slope=0.01):
    rng = np.random.default_rng(seed)
    c = shape[1]
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c) * 0.1

    def pre_act(x):
        return iabn_train(x, gamma, beta, slope=None)

    x = _away_from_kink(rng, shape, pre_act)
    return check_gradients(
        f"iabn_train{shape}",
        lambda x, gamma, beta: iabn_train(x, gamma, beta, slope=slope),
        lambda grad_out, x, gamma, beta: backward_iabn_train(x, gamma, beta, grad_out, slope=slope),
        {"x": x, "gamma": gamma, "beta": beta}, seed, H_STEP)


def suite_se(shape, seed, reduction=4):
    rng = np.random.default_rng(seed)
    c = shape[1]
    r = se_reduced_width(c, reduction)
    w_reduce = rng.standard_normal((r, c))
    w_expand = rng.standard_normal((c, r))
    b_expand = rng.standard_normal(c) * 0.1
    for _ in range(200):
        x = rng.standard_normal(shape)
        b_reduce = rng.standard_normal(r)
        a = fast_gap(x, flatten=True) @ w_reduce.T + b_reduce
        if np.all(np.abs(a) > KINK_MARGIN * 10):
            break

    def params(w_reduce, b_reduce, w_expand, b_expand):
        return SeParams(w_reduce, b_reduce, w_expand, b_expand, reduction)

    def fwd(x, w_reduce, b_reduce, w_expand, b_expand):
        return se_block(x, params(w_reduce, b_reduce, w_expand, b_expand))

    def bwd(grad_out, x, w_reduce, b_reduce, w_expand, b_expand):
        return backward_se(x, params(w_reduce, b_reduce, w_expand, b_expand), grad_out)

    inputs = dict(x=x, w_reduce=w_reduce, b_reduce=b_reduce, w_expand=w_expand, b_expand=b_expand)
    return check_gradients(f"se_block{shape}", fwd, bwd, inputs, seed, H_STEP)


def suite_focal(shape, seed, gamma_pos=0.0, gamma_neg=4.0):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal(shape) * 2
    targets = (rng.random(shape) < 0.3).astype(np.float64)
    n = logits.size

    def fwd(logits):
        # scale by the element count so per-logit gradients are O(1)
        return np.asarray(asymmetric_focal_loss(logits, targets, gamma_pos, gamma_neg) * n)

    def bwd(grad_out, logits):
        return {"logits": backward_focal(logits, targets, gamma_pos, gamma_neg, float(grad_out) * n)}

    return check_gradients(f"focal{shape}(g+={gamma_pos},g-={gamma_neg})", fwd, bwd,
                           {"logits": logits}, seed, H_STEP)


def suite_conv2d(shape, seed, out_ch=3, k=3, stride=1, padding=1, mode="zeros"):
    rng = np.random.default_rng(seed)
    weight = rng.standard_normal((out_ch, shape[1], k, k))
    bias = rng.standard_normal(out_ch)
    x = rng.standard_normal(shape)

    def conv(weight, bias):
        return ConvParams(weight=weight, bias=bias, stride=stride, padding=padding, padding_mode=mode)

    return check_gradients(
        f"conv2d{shape}", lambda x, weight, bias: conv2d(x, conv(weight, bias)),
        lambda grad_out, x, weight, bias: backward_conv2d(x, conv(weight, bias), grad_out),
        {"x": x, "weight": weight, "bias": bias}, seed, H_STEP)


SHAPES_NCHW = [(2, 4, 6, 6), (1, 3, 8, 8), (2, 2, 5, 7)]
SHAPES_S2D = [(2, 4, 8, 8), (1, 3, 4, 4), (2, 2, 8, 12)]
SHAPES_LOGITS = [(4, 5), (2, 10), (8, 3)]
SEEDS = (0, 1, 2)

SUITES = {
    "space_to_depth": (suite_space_to_depth, SHAPES_S2D),
    "aa_downsample": (suite_aa, SHAPES_NCHW),
    "iabn": (suite_iabn, SHAPES_NCHW),
    "iabn_train": (suite_iabn_train, SHAPES_NCHW),
    "se_block": (suite_se, SHAPES_NCHW),
    "fast_gap": (suite_gap, SHAPES_NCHW),
    "focal_loss": (suite_focal, SHAPES_LOGITS),
}


def run_all(seeds=SEEDS, names=None) -> List[GradResult]:
    """Every layer suite at three shapes and the given seeds."""
    results = []
    for name, (suite, shapes) in SUITES.items():
        if names is not None and name not in names:
            continue
        for shape in shapes:
            for seed in seeds:
                results.append(suite(shape, seed))
    return results
