"""Pure-numpy reference versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same functions with the same results; the compiled one
is picked at import time by :mod:`gencdet.kernels`.
"""
import numpy as np
from scipy.special import expit, logsumexp

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _split_head(raw, n_comp, sigma_floor):
    n, width = raw.shape
    p = width // n_comp - 2
    logits = raw[:, :n_comp]
    mu = raw[:, n_comp : n_comp + n_comp * p].reshape(n, n_comp, p)
    s = raw[:, n_comp + n_comp * p :]
    sigma = sigma_floor + np.logaddexp(0.0, s)
    log_alpha = logits - logsumexp(logits, axis=1, keepdims=True)
    return log_alpha, mu, s, sigma, p


def _component_logs(raw, y, n_comp, sigma_floor):
    log_alpha, mu, s, sigma, p = _split_head(raw, n_comp, sigma_floor)
    diff = y[:, None, :] - mu
    sq = np.einsum("ngp,ngp->ng", diff, diff)
    logc = log_alpha - p * _HALF_LOG_2PI - p * np.log(sigma) - 0.5 * sq / (sigma * sigma)
    return logc, log_alpha, diff, sq, s, sigma, p


def mdn_log_density(raw, y, n_comp, sigma_floor):
    """Per-row mixture log-density of ``y`` given raw head outputs."""
    logc = _component_logs(raw, y, n_comp, sigma_floor)[0]
    return logsumexp(logc, axis=1)


def mdn_nll_grad(raw, y, n_comp, sigma_floor):
    """Summed negative log-likelihood and its gradient w.r.t. the raw head."""
    logc, log_alpha, diff, sq, s, sigma, p = _component_logs(raw, y, n_comp, sigma_floor)
    ll = logsumexp(logc, axis=1)
    gamma = np.exp(logc - ll[:, None])
    inv_var = 1.0 / (sigma * sigma)
    grad = np.empty_like(raw)
    grad[:, :n_comp] = np.exp(log_alpha) - gamma
    g_mu = -(gamma * inv_var)[:, :, None] * diff
    grad[:, n_comp : n_comp + n_comp * p] = g_mu.reshape(raw.shape[0], -1)
    g_sigma = gamma * (p / sigma - sq * inv_var / sigma)
    grad[:, n_comp + n_comp * p :] = g_sigma * expit(s)
    return -float(ll.sum()), grad


def perm_u_numerators(codes, m, n_codes, uniforms):
    """Scaled U-statistic numerators under partial Fisher-Yates permutations.

    ``codes`` holds 2m compressed cell labels; row b of ``uniforms`` drives one
    shuffle of the first m positions. Returns int64 numerators (see
    :func:`gencdet.permutation.u_numerator`).
    """
    codes = np.asarray(codes, dtype=np.int64)
    n = codes.shape[0]
    n_perm = uniforms.shape[0]
    totals = np.bincount(codes, minlength=n_codes).astype(np.int64)
    sum_t2 = int((totals * totals).sum())
    arr = np.tile(codes, (n_perm, 1))
    rows = np.arange(n_perm)
    for i in range(m):
        j = i + (uniforms[:, i] * (n - i)).astype(np.int64)
        tmp = arr[rows, i].copy()
        arr[rows, i] = arr[rows, j]
        arr[rows, j] = tmp
    flat = (arr[:, :m] + (rows * n_codes)[:, None]).ravel()
    counts = np.bincount(flat, minlength=n_perm * n_codes).reshape(n_perm, n_codes)
    s = (counts * counts).sum(axis=1)
    t = counts @ totals
    return 2 * (2 * m - 1) * (s - t) + m * sum_t2 - 2 * m * m


def _views(flat, dims):
    weights, biases, pos = [], [], 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos : pos + n_out * n_in].reshape(n_out, n_in))
        pos += n_out * n_in
        biases.append(flat[pos : pos + n_out])
        pos += n_out
    return weights, biases


def mdn_train_epoch(flat, dims, slope, x, y, perm, batch, n_comp, sigma_floor, m1, m2, step, lr, beta1, beta2, eps):
    """One epoch of minibatch Adam on the mixture negative log-likelihood.

    ``flat`` (network parameters in the layout of :mod:`gencdet.nn`), ``m1`` and
    ``m2`` (Adam moments) are updated in place. Rows are visited in the order of
    ``perm`` in consecutive batches of ``batch``; a trailing partial batch is
    skipped. Returns ``(summed NLL, Adam step count, status)`` with status 0 on
    success, 1 for a non-finite loss and 2 for a non-finite gradient.
    """
    weights, biases = _views(flat, dims)
    grad = np.empty_like(flat)
    gw, gb = _views(grad, dims)
    n_layers = len(weights)
    total = 0.0
    for b in range(len(perm) // batch):
        idx = perm[b * batch : (b + 1) * batch]
        h = x[idx]
        inputs = [h]
        for i in range(n_layers):
            z = h @ weights[i].T + biases[i]
            if i < n_layers - 1:
                h = np.maximum(z, slope * z)
                inputs.append(h)
            else:
                h = z
        loss, g = mdn_nll_grad(h, y[idx], n_comp, sigma_floor)
        if not np.isfinite(loss):
            return total, step, 1
        total += loss
        g = g / batch
        for i in range(n_layers - 1, -1, -1):
            gw[i][...] = g.T @ inputs[i]
            gb[i][...] = g.sum(axis=0)
            if i > 0:
                g = g @ weights[i]
                g[inputs[i] <= 0] *= slope
        if not np.isfinite(grad).all():
            return total, step, 2
        step += 1
        m1 *= beta1
        m1 += (1.0 - beta1) * grad
        m2 *= beta2
        m2 += (1.0 - beta2) * grad * grad
        lr_t = lr * np.sqrt(1.0 - beta2**step) / (1.0 - beta1**step)
        eps_t = eps * np.sqrt(1.0 - beta2**step)
        flat -= lr_t * m1 / (np.sqrt(m2) + eps_t)
    return total, step, 0
