"""Loss terms of the frozen-to-paraffin translation objective, with analytic gradients.

Only the arithmetic is implemented: the generator, discriminator and projection
head are represented by their outputs (discriminator scores, patch embeddings).
"""

from dataclasses import dataclass

import numpy as np

from .errors import HistoBofError


class EmptyInput(HistoBofError, ValueError):
    pass


class TooFewPatches(HistoBofError, ValueError):
    pass


class ZeroVector(HistoBofError, ValueError):
    pass


class NegativeComponent(HistoBofError, ValueError):
    pass


def _scores(x, name):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInput(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def lsgan_discriminator_loss(real_scores, fake_scores):
    """``0.5*mean((real-1)^2) + 0.5*mean(fake^2)`` and its gradients.

    Returns ``(value, grad_real, grad_fake)``.
    """
    r = _scores(real_scores, "real_scores")
    f = _scores(fake_scores, "fake_scores")
    value = 0.5 * np.mean((r - 1.0) ** 2) + 0.5 * np.mean(f ** 2)
    return float(value), (r - 1.0) / r.size, f / f.size


def lsgan_generator_loss(fake_scores):
    """``0.5*mean((fake-1)^2)``; returns ``(value, grad)``."""
    f = _scores(fake_scores, "fake_scores")
    return float(0.5 * np.mean((f - 1.0) ** 2)), (f - 1.0) / f.size


def _normalize(v, name):
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector(f"{name} contains a zero-norm vector")
    return v / norms[:, None], norms


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def patchnce_loss(query, keys, temperature=0.07):
    """Contrastive patch loss with in-batch negatives.

    Row ``i`` of ``query`` is pulled toward ``keys[i]`` and pushed away from
    every other key. Vectors are L2-normalized; logits are cosine similarities
    divided by ``temperature``. Returns ``(value, grad_query, grad_keys)``.
    """
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    k = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if q.shape != k.shape:
        raise ValueError(f"query shape {q.shape} differs from keys shape {k.shape}")
    m = q.shape[0]
    if m < 2:
        raise TooFewPatches("need at least two patches for in-batch negatives")
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    qn, q_norm = _normalize(q, "query")
    kn, k_norm = _normalize(k, "keys")
    logits = (qn @ kn.T) / temperature
    lse = _logsumexp(logits, axis=1)
    value = float(np.mean(lse - np.diag(logits)))

    probs = np.exp(logits - lse[:, None])
    g_s = (probs - np.eye(m)) / (temperature * m)
    g_qn = g_s @ kn
    g_kn = g_s.T @ qn
    # back through v / |v|: (g - n (n . g)) / |v|
    g_q = (g_qn - qn * (qn * g_qn).sum(axis=1, keepdims=True)) / q_norm[:, None]
    g_k = (g_kn - kn * (kn * g_kn).sum(axis=1, keepdims=True)) / k_norm[:, None]
    return value, g_q, g_k


@dataclass(frozen=True)
class LossBreakdown:
    l_gan: float
    l_nce_source: float
    l_nce_target: float
    lambda_f: float
    lambda_g: float
    total: float


def total_objective(l_gan, l_nce_f, l_nce_p, lambda_f=1.0, lambda_g=1.0):
    """Weighted sum of the adversarial term and the two PatchNCE terms."""
    parts = {"l_gan": l_gan, "l_nce_f": l_nce_f, "l_nce_p": l_nce_p,
             "lambda_f": lambda_f, "lambda_g": lambda_g}
    for name, v in parts.items():
        if not np.isfinite(v):
            raise ValueError(f"{name} is not finite")
        if v < 0:
            raise NegativeComponent(f"{name} is negative ({v})")
    total = l_gan + lambda_f * l_nce_f + lambda_g * l_nce_p
    return LossBreakdown(float(l_gan), float(l_nce_f), float(l_nce_p),
                         float(lambda_f), float(lambda_g), float(total))


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        up = f(x)
        x[idx] = orig - step
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


def relative_error(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradient_check_suite(n_instances=100, seed=0, temperatures=(0.07, 1.0), step=1e-5):
    """Compare every analytic gradient with central differences on random inputs.

    Returns ``{check name: max relative error}``.
    """
    rng = np.random.default_rng(seed)
    worst = {"lsgan_discriminator": 0.0, "lsgan_generator": 0.0}
    for tau in temperatures:
        worst[f"patchnce_tau={tau:g}"] = 0.0

    for _ in range(n_instances):
        n_r, n_f = rng.integers(1, 12, size=2)
        r = rng.normal(0.5, 1.0, n_r)
        f = rng.normal(0.5, 1.0, n_f)
        _, gr, gf = lsgan_discriminator_loss(r, f)
        nr = central_difference(lambda v: lsgan_discriminator_loss(v, f)[0], r, step)
        nf = central_difference(lambda v: lsgan_discriminator_loss(r, v)[0], f, step)
        worst["lsgan_discriminator"] = max(worst["lsgan_discriminator"],
                                           relative_error(gr, nr), relative_error(gf, nf))
        _, g = lsgan_generator_loss(f)
        ng = central_difference(lambda v: lsgan_generator_loss(v)[0], f, step)
        worst["lsgan_generator"] = max(worst["lsgan_generator"], relative_error(g, ng))

        for tau in temperatures:
            m = int(rng.integers(2, 9))
            d = int(rng.integers(2, 17))
            q = rng.standard_normal((m, d))
            k = rng.standard_normal((m, d))
            _, gq, gk = patchnce_loss(q, k, tau)
            nq = central_difference(lambda v: patchnce_loss(v, k, tau)[0], q, step)
            nk = central_difference(lambda v: patchnce_loss(q, v, tau)[0], k, step)
            key = f"patchnce_tau={tau:g}"
            worst[key] = max(worst[key], relative_error(gq, nq), relative_error(gk, nk))
    return worst
