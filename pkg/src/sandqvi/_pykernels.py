"""NumPy versions of the compiled kernels (same signatures and layout)."""
import numpy as np


def gradient(y, hx, hy, use_d2):
    d1 = np.empty_like(y)
    d1[:, :-1] = y[:, 1:] - y[:, :-1]
    d1[:, -1] = -y[:, -1]
    d1 /= hx
    d2 = np.zeros_like(y)
    if use_d2:
        d2[:-1, :] = y[1:, :] - y[:-1, :]
        d2[-1, :] = -y[-1, :]
        d2 /= hy
    return d1, d2


def gradient_adjoint(q1, q2, hx, hy, use_d2):
    out = np.empty_like(q1)
    out[:, 0] = -q1[:, 0]
    out[:, 1:] = q1[:, :-1] - q1[:, 1:]
    out /= hx
    if use_d2:
        t = np.empty_like(q2)
        t[0, :] = -q2[0, :]
        t[1:, :] = q2[:-1, :] - q2[1:, :]
        out += t / hy
    return out


def penalty(y, m, hx, hy, use_d2, box):
    u1, u2 = gradient(y, hx, hy, use_d2)
    m2 = m * m
    if box:
        q1 = np.maximum(u1 * u1 - m2, 0.0)
        q2 = np.maximum(u2 * u2 - m2, 0.0) if use_d2 else np.zeros_like(u2)
        value = 0.25 * (np.sum(q1 * q1) + np.sum(q2 * q2))
        grad = gradient_adjoint(q1 * u1, q2 * u2, hx, hy, use_d2)
    else:
        q = np.maximum(u1 * u1 + u2 * u2 - m2, 0.0)
        value = 0.25 * np.sum(q * q)
        grad = gradient_adjoint(q * u1, q * u2, hx, hy, use_d2)
    return float(value), grad
