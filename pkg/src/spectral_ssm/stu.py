"""STU sequence layers: spectral featurization and forward passes.

The featurization convolves the input with the fixed filters,

    U+[t, k] = sum_{i=0}^{t-1} u_{t-i} * phi_k(i)
    U-[t, k] = sum_{i=0}^{t-1} u_{t-i} * (-1)^i * phi_k(i)

(filters indexed from lag 0, u zero for t <= 0).  The layer output is

    y_t = y_{t-2} + sum_{i=1..3} M_u[i] u_{t+1-i}
        + sum_k M_plus[k] sigma_k^{1/4} U+[t-2, k]
        + sum_k M_minus[k] sigma_k^{1/4} U-[t-2, k]

with all terms at nonpositive indices contributing zero.  The alternative
variant drops the sign-modulated family and uses a single M_phi set; the
autoregressive extension replaces the fixed y_{t-2} coupling with learned
matrices over the last k_y outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import load_arrays, save_arrays
from .filterbank import FilterBank, HankelVariant, _as_variant


@dataclass
class StuParams:
    """Learnable layer matrices. Alternative variant keeps M_phi_minus empty."""

    variant: HankelVariant
    K: int
    d_in: int
    d_out: int
    M_u: np.ndarray  # (3, d_out, d_in)
    M_phi_plus: np.ndarray  # (K, d_out, d_in)
    M_phi_minus: np.ndarray  # (K, d_out, d_in) or (0, d_out, d_in)
    M_y: np.ndarray | None = None  # (k_y, d_out, d_out) when autoregressive

    def __post_init__(self):
        self.variant = _as_variant(self.variant)
        if self.M_u.shape != (3, self.d_out, self.d_in):
            raise ValueError(f"M_u must have shape (3, {self.d_out}, {self.d_in})")
        if self.M_phi_plus.shape != (self.K, self.d_out, self.d_in):
            raise ValueError(f"M_phi_plus must have shape ({self.K}, {self.d_out}, {self.d_in})")
        want_minus = self.K if self.variant is HankelVariant.PRIMARY else 0
        if self.M_phi_minus.shape != (want_minus, self.d_out, self.d_in):
            raise ValueError(f"M_phi_minus must have shape ({want_minus}, {self.d_out}, {self.d_in})")
        if self.M_y is not None and (
            self.M_y.ndim != 3 or self.M_y.shape[1:] != (self.d_out, self.d_out)
        ):
            raise ValueError(f"M_y must have shape (k_y, {self.d_out}, {self.d_out})")

    @property
    def k_y(self) -> int:
        return 0 if self.M_y is None else self.M_y.shape[0]

    @classmethod
    def zeros(cls, K, d_in, d_out, variant=HankelVariant.PRIMARY, k_y=0) -> "StuParams":
        variant = _as_variant(variant)
        n_minus = K if variant is HankelVariant.PRIMARY else 0
        return cls(
            variant=variant,
            K=K,
            d_in=d_in,
            d_out=d_out,
            M_u=np.zeros((3, d_out, d_in)),
            M_phi_plus=np.zeros((K, d_out, d_in)),
            M_phi_minus=np.zeros((n_minus, d_out, d_in)),
            M_y=np.zeros((k_y, d_out, d_out)) if k_y else None,
        )

    def named_arrays(self):
        yield "M_u", self.M_u
        yield "M_phi_plus", self.M_phi_plus
        yield "M_phi_minus", self.M_phi_minus
        if self.M_y is not None:
            yield "M_y", self.M_y

    def copy(self) -> "StuParams":
        return StuParams(
            variant=self.variant,
            K=self.K,
            d_in=self.d_in,
            d_out=self.d_out,
            M_u=self.M_u.copy(),
            M_phi_plus=self.M_phi_plus.copy(),
            M_phi_minus=self.M_phi_minus.copy(),
            M_y=None if self.M_y is None else self.M_y.copy(),
        )


@dataclass
class SpectralFeatures:
    """Filter projections of an input batch; both tensors are (batch, time, K, d_in)."""

    U_plus: np.ndarray
    U_minus: np.ndarray


def _check_inputs(inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3:
        raise ValueError(f"expected inputs of shape (batch, time, channels), got {inputs.shape}")
    return inputs


def _fft_length(L: int) -> int:
    # Next power of two >= 2L - 1: unambiguous linear convolution.
    return 1 << (2 * L - 2).bit_length() if L > 1 else 1


# Chunk FFT work over the filter axis so transient spectra stay a few MB;
# monolithic (batch, bins, K, C) tensors cross glibc's mmap threshold and make
# the wall time allocation-bound and erratic.
_CHUNK_BYTES = 4 << 20


def _filter_chunk(bins: int, B: int, C: int) -> int:
    return max(1, _CHUNK_BYTES // (16 * bins * B * C))


def convolve_filters(filters: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Causal convolution of each channel with each filter row, via FFT.

    filters: (K, L); inputs: (batch, T, C) with T <= L.
    Returns (batch, T, K, C) where out[b, t, k, c] = sum_i inputs[b, t - i, c] * filters[k, i].
    """
    B, T, C = inputs.shape
    K, L = filters.shape
    n = _fft_length(max(L, T))
    Uf = np.fft.rfft(inputs, n=n, axis=1)
    Ff = np.fft.rfft(filters, n=n, axis=1)
    out = np.empty((B, T, K, C))
    step = _filter_chunk(Uf.shape[1], B, C)
    for k0 in range(0, K, step):
        prod = Uf[:, :, None, :] * Ff[k0 : k0 + step].T[None, :, :, None]
        out[:, :, k0 : k0 + step] = np.fft.irfft(prod, n=n, axis=1)[:, :T]
    return out


def correlate_filters(filters: np.ndarray, series: np.ndarray) -> np.ndarray:
    """Adjoint of convolve_filters: out[b, m, c] = sum_{t >= m} series[b, t, k, c] * filters[k, t - m].

    series: (batch, T, K, C); returns (batch, T, C).  Used for gradients that
    flow backwards through the fixed-filter convolution.
    """
    B, T, K, C = series.shape
    _, L = filters.shape
    n = _fft_length(max(L, T))
    Ff = np.conj(np.fft.rfft(filters, n=n, axis=1))
    bins = Ff.shape[1]
    acc = np.zeros((B, bins, C), dtype=np.complex128)
    step = _filter_chunk(bins, B, C)
    for k0 in range(0, K, step):
        Sf = np.fft.rfft(series[:, :, k0 : k0 + step], n=n, axis=1)
        acc += np.einsum("bfkc,kf->bfc", Sf, Ff[k0 : k0 + step])
    return np.ascontiguousarray(np.fft.irfft(acc, n=n, axis=1)[:, :T])


def _alternating(filters: np.ndarray) -> np.ndarray:
    signs = (-1.0) ** np.arange(filters.shape[1])
    return filters * signs


def featurize(bank: FilterBank, inputs: np.ndarray) -> SpectralFeatures:
    """FFT featurization against the bank's (unscaled) filters."""
    inputs = _check_inputs(inputs)
    if inputs.shape[1] > bank.L:
        raise ValueError(f"sequence length {inputs.shape[1]} exceeds bank length {bank.L}")
    both = np.concatenate([bank.phi, _alternating(bank.phi)], axis=0)
    out = convolve_filters(both, inputs)
    return SpectralFeatures(U_plus=out[:, :, : bank.K], U_minus=out[:, :, bank.K :])


def naive_featurize(bank: FilterBank, inputs: np.ndarray) -> SpectralFeatures:
    """Reference O(L^2) featurization by direct summation."""
    inputs = _check_inputs(inputs)
    B, T, C = inputs.shape
    if T > bank.L:
        raise ValueError(f"sequence length {T} exceeds bank length {bank.L}")
    U_plus = np.zeros((B, T, bank.K, C))
    U_minus = np.zeros((B, T, bank.K, C))
    signs = (-1.0) ** np.arange(bank.L)
    for t in range(T):
        window = inputs[:, t::-1]  # u_t, u_{t-1}, ..., u_0
        U_plus[:, t] = np.einsum("bic,ki->bkc", window, bank.phi[:, : t + 1])
        U_minus[:, t] = np.einsum(
            "bic,ki->bkc", window, (bank.phi * signs)[:, : t + 1]
        )
    return SpectralFeatures(U_plus=U_plus, U_minus=U_minus)


def _scaled_features(params: StuParams, bank: FilterBank, inputs: np.ndarray):
    """sigma^{1/4}-scaled feature tensors for the first params.K filters."""
    scaled = bank.scaled_phi[: params.K]
    if params.variant is HankelVariant.PRIMARY:
        both = np.concatenate([scaled, _alternating(scaled)], axis=0)
        out = convolve_filters(both, inputs)
        return out[:, :, : params.K], out[:, :, params.K :]
    return convolve_filters(scaled, inputs), None


def increments_from_features(params: StuParams, inputs, su_plus, su_minus) -> np.ndarray:
    """Per-step increment g_t from precomputed scaled feature tensors."""
    B, T, _ = inputs.shape
    g = inputs @ params.M_u[0].T
    if T > 1:
        g[:, 1:] += inputs[:, :-1] @ params.M_u[1].T
    if T > 2:
        g[:, 2:] += inputs[:, :-2] @ params.M_u[2].T
        g[:, 2:] += np.einsum("koc,btkc->bto", params.M_phi_plus, su_plus[:, : T - 2])
        if su_minus is not None:
            g[:, 2:] += np.einsum("koc,btkc->bto", params.M_phi_minus, su_minus[:, : T - 2])
    return g


def affine_increments(params: StuParams, bank: FilterBank, inputs: np.ndarray) -> np.ndarray:
    """Per-step increment g_t: input taps plus the (t-2)-shifted spectral term.

    Every forward pass below is this increment fed through its output
    recursion, so the increments are also the convex feature map used by the
    least-squares trainer.
    """
    inputs = _check_inputs(inputs)
    if params.variant is not bank.variant:
        raise ValueError(f"params variant {params.variant} does not match bank {bank.variant}")
    if params.K > bank.K:
        raise ValueError(f"params need {params.K} filters but bank has {bank.K}")
    if inputs.shape[1] > bank.L:
        raise ValueError(f"sequence length {inputs.shape[1]} exceeds bank length {bank.L}")
    if inputs.shape[2] != params.d_in:
        raise ValueError(f"expected {params.d_in} input channels, got {inputs.shape[2]}")
    su_plus, su_minus = _scaled_features(params, bank, inputs)
    return increments_from_features(params, inputs, su_plus, su_minus)


def _parity_cumsum(g: np.ndarray) -> np.ndarray:
    out = g.copy()
    out[:, 0::2] = np.cumsum(out[:, 0::2], axis=1)
    out[:, 1::2] = np.cumsum(out[:, 1::2], axis=1)
    return out


def recurse_outputs(params: StuParams, g: np.ndarray) -> np.ndarray:
    """Resolve the output recursion over the increments: a parity prefix sum
    for the fixed y_{t-2} coupling, a sequential scan when M_y is learned."""
    if params.k_y == 0:
        return _parity_cumsum(g)
    B, T, _ = g.shape
    y = np.zeros_like(g)
    for t in range(T):
        acc = g[:, t]
        for i in range(1, min(params.k_y, t) + 1):
            acc = acc + y[:, t - i] @ params.M_y[i - 1].T
        y[:, t] = acc
    return y


def stu_forward(params: StuParams, bank: FilterBank, inputs: np.ndarray) -> np.ndarray:
    """Vanilla forward pass (primary variant, fixed y_{t-2} coupling)."""
    if params.variant is not HankelVariant.PRIMARY:
        raise ValueError("stu_forward requires the primary variant")
    if params.M_y is not None:
        raise ValueError("params carry M_y; use ar_stu_forward")
    # y_t = y_{t-2} + g_t resolves to a prefix sum along each parity chain.
    return _parity_cumsum(affine_increments(params, bank, inputs))


def ar_stu_forward(params: StuParams, bank: FilterBank, inputs: np.ndarray) -> np.ndarray:
    """Forward pass with learned autoregression over the last k_y outputs."""
    if params.M_y is None or params.k_y < 1:
        raise ValueError("ar_stu_forward requires M_y with k_y >= 1")
    return recurse_outputs(params, affine_increments(params, bank, inputs))


def alt_stu_forward(params: StuParams, bank: FilterBank, inputs: np.ndarray) -> np.ndarray:
    """Forward pass for the alternative filter family (single M_phi set)."""
    if params.variant is not HankelVariant.ALTERNATIVE:
        raise ValueError("alt_stu_forward requires the alternative variant")
    if bank.variant is not HankelVariant.ALTERNATIVE:
        raise ValueError("alt_stu_forward requires an alternative-variant bank")
    if params.M_y is not None:
        raise ValueError("params carry M_y; use ar_stu_forward")
    return _parity_cumsum(affine_increments(params, bank, inputs))


def forward(params: StuParams, bank: FilterBank, inputs: np.ndarray) -> np.ndarray:
    """Dispatch on params: autoregressive, alternative, or vanilla."""
    if params.k_y >= 1:
        return ar_stu_forward(params, bank, inputs)
    if params.variant is HankelVariant.ALTERNATIVE:
        return alt_stu_forward(params, bank, inputs)
    return stu_forward(params, bank, inputs)


def save_stu_params(params: StuParams, directory) -> Path:
    arrays = {name: arr for name, arr in params.named_arrays()}
    meta = {
        "kind": "stu_params",
        "variant": params.variant.value,
        "K": params.K,
        "d_in": params.d_in,
        "d_out": params.d_out,
        "k_y": params.k_y,
    }
    return save_arrays(directory, meta, arrays)


def load_stu_params(directory) -> StuParams:
    meta, arrays = load_arrays(directory)
    if meta.get("kind") != "stu_params":
        raise ValueError(f"not an STU parameter container: {directory}")
    return StuParams(
        variant=HankelVariant(meta["variant"]),
        K=int(meta["K"]),
        d_in=int(meta["d_in"]),
        d_out=int(meta["d_out"]),
        M_u=arrays["M_u"],
        M_phi_plus=arrays["M_phi_plus"],
        M_phi_minus=arrays["M_phi_minus"],
        M_y=arrays.get("M_y") if int(meta["k_y"]) else None,
    )
