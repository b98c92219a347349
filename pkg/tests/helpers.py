"""Shared test utilities: finite-difference oracles and op case tables."""

import numpy as np

from channelvit import tensor as T

FD_STEP = 1e-5


def central_difference(loss_fn, arr, step=FD_STEP):
    """Numeric gradient of loss_fn() wrt `arr`, mutated entry by entry."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = float(loss_fn())
        flat[i] = orig - step
        minus = float(loss_fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def central_difference_sample(loss_fn, arr, indices, step=FD_STEP):
    """Numeric gradient at selected flat indices only."""
    flat = arr.ravel()
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        plus = float(loss_fn())
        flat[i] = orig - step
        minus = float(loss_fn())
        flat[i] = orig
        out[j] = (plus - minus) / (2.0 * step)
    return out


def assert_grad_close(analytic, numeric, rel=1e-4, abs_tol=1e-6):
    err = np.abs(analytic - numeric)
    tol = np.maximum(abs_tol, rel * np.abs(numeric))
    assert (err <= tol).all(), f"max grad error {err.max()} vs tol {tol.min()}"


def op_cases(rng):
    """(name, params, build) triples covering every differentiable op; build()
    returns a scalar loss node over the (mutated in place) param values."""
    d = 4
    a = T.param(rng.normal(size=(3, d)))
    b = T.param(rng.normal(size=(d, 2)))
    gamma = T.param(rng.normal(size=d) + 1.0)
    beta = T.param(rng.normal(size=d))
    table = T.param(rng.normal(size=(5, d)))
    wq, wk, wv, wo = (T.param(rng.normal(size=(d, d)) * 0.4) for _ in range(4))
    logits = T.param(rng.normal(size=(3, d)))
    mix = T.constant(rng.normal(size=(3, d)))

    def c(node):
        return T.constant(node.value)

    return [
        ("matmul", [a, b],
         lambda pa, pb: T.sum_all(T.matmul(pa, pb))),
        ("add_broadcast", [a, beta],
         lambda pa, pb: T.sum_all(T.mul(T.add(pa, pb), mix))),
        ("mul", [a],
         lambda pa: T.sum_all(T.mul(pa, pa))),
        ("scale", [a],
         lambda pa: T.sum_all(T.scale(pa, -1.7))),
        ("softmax", [a],
         lambda pa: T.sum_all(T.mul(T.softmax(pa, axis=-1), mix))),
        ("layer_norm", [a, gamma, beta],
         lambda pa, pg, pb: T.sum_all(T.mul(T.layer_norm(pa, pg, pb, 1e-6), mix))),
        ("gelu", [a],
         lambda pa: T.sum_all(T.mul(T.gelu(pa), mix))),
        ("gather", [table],
         lambda pt: T.sum_all(T.mul(T.gather_rows(pt, [0, 2, 2]),
                                    T.constant(mix.value[:3])))),
        ("concat_slice", [a, b],
         lambda pa, pb: T.sum_all(T.slice_axis(
             T.concat([pa, T.transpose(pb, (1, 0))], axis=0), 0, 1, 4))),
        ("attention", [wq, wk, wv, wo],
         lambda q, k, v, o: T.sum_all(T.mul(
             T.multihead_attention(c(a), q, k, v, o, heads=2), mix))),
        ("cross_entropy", [logits],
         lambda pl: T.cross_entropy(pl, [0, 1, 3])),
    ]
