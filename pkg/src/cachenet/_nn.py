"""Dense-layer helpers shared by the autoencoder and the submodels."""
import numpy as np

from . import autodiff as ad


def init_dense(rng, fan_in, fan_out, zero=False):
    if zero:
        return np.zeros((fan_in, fan_out), np.float32), np.zeros(fan_out, np.float32)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    W = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)
    return W, np.zeros(fan_out, np.float32)


def dense(x, W, b):
    return ad.add(ad.matmul(x, W), b)


def check_finite(x, what="input"):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ad.DomainError(f"{what} contains NaN or Inf")
    return x
