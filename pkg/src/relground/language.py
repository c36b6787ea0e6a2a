"""Expression encoding: bi-directional LSTM, per-module attended queries,
and the softmax module-weight head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import ParameterStore

GATE_ORDER = "ifo|g"  # sigmoid block (input, forget, output), then tanh cell gate


@dataclass
class LanguageParams:
    fwd_in: torch.Tensor     # (d, 4h)
    fwd_rec: torch.Tensor    # (h, 4h)
    fwd_bias: torch.Tensor   # (4h,)
    bwd_in: torch.Tensor
    bwd_rec: torch.Tensor
    bwd_bias: torch.Tensor
    f_sub: torch.Tensor      # (2h,)
    f_loc: torch.Tensor
    f_rel: torch.Tensor
    wm_weight: torch.Tensor  # (4h, 3)
    wm_bias: torch.Tensor    # (3,)

    @property
    def hidden(self) -> int:
        return self.fwd_rec.shape[0]


@dataclass
class ExpressionEncoding:
    E: torch.Tensor        # (T, d) word embeddings
    H: torch.Tensor        # (T, 2h) fwd/bwd concatenated states

    @property
    def h_first(self) -> torch.Tensor:
        return self.H[0]

    @property
    def h_last(self) -> torch.Tensor:
        return self.H[-1]


def init_language_params(store: ParameterStore, d: int, h: int,
                         rng: np.random.Generator, prefix: str = "lang") -> LanguageParams:
    k = 1.0 / np.sqrt(h)

    def uni(shape):
        return rng.uniform(-k, k, size=shape)

    return LanguageParams(
        fwd_in=store.register(f"{prefix}.fwd_in", uni((d, 4 * h))),
        fwd_rec=store.register(f"{prefix}.fwd_rec", uni((h, 4 * h))),
        fwd_bias=store.register(f"{prefix}.fwd_bias", np.zeros(4 * h)),
        bwd_in=store.register(f"{prefix}.bwd_in", uni((d, 4 * h))),
        bwd_rec=store.register(f"{prefix}.bwd_rec", uni((h, 4 * h))),
        bwd_bias=store.register(f"{prefix}.bwd_bias", np.zeros(4 * h)),
        f_sub=store.register(f"{prefix}.f_sub", uni(2 * h)),
        f_loc=store.register(f"{prefix}.f_loc", uni(2 * h)),
        f_rel=store.register(f"{prefix}.f_rel", uni(2 * h)),
        wm_weight=store.register(f"{prefix}.wm_weight", uni((4 * h, 3))),
        wm_bias=store.register(f"{prefix}.wm_bias", np.zeros(3)),
    )


def _lstm_direction(E: torch.Tensor, w_in, w_rec, bias, h: int) -> list[torch.Tensor]:
    """One direction over (B, T, d); returns per-step states, input order."""
    B, T, _ = E.shape
    state = E.new_zeros((B, h))
    cell = E.new_zeros((B, h))
    pre = E.reshape(B * T, -1) @ w_in   # input projection for all steps at once
    pre = (pre + bias).reshape(B, T, -1)
    outs = []
    for t in range(T):
        gates = pre[:, t] + state @ w_rec
        sig = torch.sigmoid(gates[:, :3 * h])
        i, f, o = torch.split(sig, h, dim=1)
        cell = f * cell + i * torch.tanh(gates[:, 3 * h:])
        state = o * torch.tanh(cell)
        outs.append(state)
    return outs


def encode_batch(E: torch.Tensor, params: LanguageParams) -> torch.Tensor:
    """Bi-directional encoding of (B, T, d) embeddings -> (B, T, 2h).

    Row t concatenates the forward state after reading tokens 0..t and the
    backward state after reading tokens T-1..t.
    """
    h = params.hidden
    fwd = _lstm_direction(E, params.fwd_in, params.fwd_rec, params.fwd_bias, h)
    rev = _lstm_direction(torch.flip(E, dims=(1,)), params.bwd_in, params.bwd_rec,
                          params.bwd_bias, h)
    bwd = rev[::-1]
    return torch.cat([torch.stack(fwd, dim=1), torch.stack(bwd, dim=1)], dim=2)


def encode(E: torch.Tensor, params: LanguageParams) -> ExpressionEncoding:
    """Encode one expression's (T, d) embedding sequence."""
    if E.shape[0] < 1:
        raise ValueError("expression must have at least one token")
    H = encode_batch(E.unsqueeze(0), params)[0]
    return ExpressionEncoding(E=E, H=H)


def attended_query(enc: ExpressionEncoding, f_m: torch.Tensor) -> torch.Tensor:
    """Softmax attention over positions; returns the weighted sum of the
    word embeddings (not the hidden states)."""
    weights = torch.softmax(enc.H @ f_m, dim=0)
    return weights @ enc.E


def module_weights(enc: ExpressionEncoding, params: LanguageParams) -> torch.Tensor:
    """(w_sub, w_loc, w_rel) softmax from the first and last hidden states."""
    z = torch.cat([enc.h_first, enc.h_last])
    return torch.softmax(z @ params.wm_weight + params.wm_bias, dim=0)


def queries_and_weights_batch(E: torch.Tensor, H: torch.Tensor, params: LanguageParams):
    """Batched attended queries and module weights.

    E: (B, T, d), H: (B, T, 2h). Returns (q_sub, q_loc, q_rel) each (B, d),
    module weights (B, 3), and the language summary [h_first, h_last] (B, 4h).
    """
    fm = torch.stack([params.f_sub, params.f_loc, params.f_rel], dim=1)  # (2h, 3)
    att = torch.softmax(H @ fm, dim=1)                 # (B, T, 3)
    q = torch.einsum("btm,btd->bmd", att, E)           # (B, 3, d)
    summary = torch.cat([H[:, 0], H[:, -1]], dim=1)    # (B, 4h)
    wts = torch.softmax(summary @ params.wm_weight + params.wm_bias, dim=1)
    return q[:, 0], q[:, 1], q[:, 2], wts, summary
