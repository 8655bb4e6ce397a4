import numpy as np
import pytest

from spectral_ssm import HankelVariant, compute_filterbank

VARIANTS = [HankelVariant.PRIMARY, HankelVariant.ALTERNATIVE]


@pytest.fixture(scope="session")
def bank64():
    return compute_filterbank(64, 16)


@pytest.fixture(scope="session")
def bank256():
    return compute_filterbank(256, 24)


@pytest.fixture(scope="session")
def alt_bank64():
    return compute_filterbank(64, 16, HankelVariant.ALTERNATIVE)


@pytest.fixture(scope="session")
def alt_bank256():
    return compute_filterbank(256, 24, HankelVariant.ALTERNATIVE)


def fd_gradcheck(loss_fn, named_arrays, grads, h=1e-6):
    """Worst mixed relative/absolute error of analytic grads vs central
    differences: |fd - g| / max(1, |fd|, |g|).  The unit floor keeps the
    comparison meaningful where true gradients sit below the finite-difference
    roundoff (~eps * loss / h); real gradient bugs surface as errors on the
    order of the gradient itself."""
    worst = 0.0
    for name, arr in named_arrays:
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = arr[ix]
            arr[ix] = old + h
            lp = loss_fn()
            arr[ix] = old - h
            lm = loss_fn()
            arr[ix] = old
            fd = (lp - lm) / (2 * h)
            g = grads[name][ix]
            worst = max(worst, abs(fd - g) / max(1.0, abs(fd), abs(g)))
    return worst
