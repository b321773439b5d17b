"""Spatial-temporal trajectory encoder.

Each record becomes the sum of a learned location embedding, a learnable-
frequency trig encoding of (normalized) time, and the column-concatenation
of trig encodings of the two coordinates. Stacked induced-attention layers
(a small set of learned anchors attending over the record rows, post-norm
residuals) pool the sequence; the final anchor matrix flattens row-major
into the trajectory embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cstte.errors import ConfigError
from cstte.numcore import (
    DiffArray,
    add,
    concat_cols,
    constant,
    feed_forward,
    gather_rows,
    layer_norm,
    multi_head_attention,
    parameter,
    reshape,
    trig_encode,
)
from cstte.trajdata import Trajectory

ParamSet = dict[str, DiffArray]


@dataclass(frozen=True)
class EncoderConfig:
    n_locations: int
    d_l: int = 64
    anchor_lengths: tuple[int, ...] = (2,)
    n_heads: int = 8
    ffn_hidden: int = 128
    use_location: bool = True
    use_time: bool = True
    use_coords: bool = True
    use_fixed_positional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "anchor_lengths", tuple(int(a) for a in self.anchor_lengths))
        if self.n_locations < 1:
            raise ConfigError(f"n_locations must be >= 1, got {self.n_locations}")
        if self.d_l < 2 or self.d_l % 2 != 0:
            raise ConfigError(f"d_l must be a positive even width, got {self.d_l}")
        if self.n_heads < 1 or self.d_l % self.n_heads != 0:
            raise ConfigError(f"d_l={self.d_l} must divide into n_heads={self.n_heads}")
        if self.use_coords and self.d_l % 4 != 0:
            raise ConfigError(
                f"coordinate encodings use two interleaved halves; d_l={self.d_l} "
                "must be divisible by 4"
            )
        if not self.anchor_lengths or any(a < 1 for a in self.anchor_lengths):
            raise ConfigError(f"anchor_lengths must be positive, got {self.anchor_lengths}")
        if self.ffn_hidden < 1:
            raise ConfigError(f"ffn_hidden must be >= 1, got {self.ffn_hidden}")
        if not (
            self.use_location or self.use_time or self.use_coords or self.use_fixed_positional
        ):
            raise ConfigError("encoder needs at least one input feature enabled")

    @property
    def output_dim(self) -> int:
        return self.anchor_lengths[-1] * self.d_l

    def to_dict(self) -> dict:
        return {
            "n_locations": self.n_locations,
            "d_l": self.d_l,
            "anchor_lengths": list(self.anchor_lengths),
            "n_heads": self.n_heads,
            "ffn_hidden": self.ffn_hidden,
            "use_location": self.use_location,
            "use_time": self.use_time,
            "use_coords": self.use_coords,
            "use_fixed_positional": self.use_fixed_positional,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["anchor_lengths"] = tuple(d["anchor_lengths"])
        return cls(**d)


def frequency_ladder(width: int) -> np.ndarray:
    """Geometric init 1/10000^(2i/width) for the width/2 frequencies."""
    m = width // 2
    return 1.0 / np.power(10000.0, 2.0 * np.arange(m) / width)


def fixed_positional_encoding(n: int, width: int) -> np.ndarray:
    """Non-learnable sequence-position sin/cos table (used by one ablation)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    freqs = 1.0 / np.power(10000.0, 2.0 * np.arange(width // 2, dtype=np.float64) / width)
    table = np.zeros((n, width))
    table[:, 0::2] = np.sin(pos * freqs[None, :])
    table[:, 1::2] = np.cos(pos * freqs[None, :])
    return table


def init_params(config: EncoderConfig, rng: np.random.Generator) -> ParamSet:
    """Seeded init: uniform +-sqrt(1/fan_in) weights, zero biases, unit gains."""

    def uniform(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    d = config.d_l
    params: ParamSet = {}
    if config.use_location:
        params["loc_emb"] = parameter(uniform((config.n_locations, d), d))
    if config.use_time:
        params["psi_t.omega"] = parameter(frequency_ladder(d))
    if config.use_coords:
        params["psi_cx.omega"] = parameter(frequency_ladder(d // 2))
        params["psi_cy.omega"] = parameter(frequency_ladder(d // 2))
    for i, n_anchor in enumerate(config.anchor_lengths):
        prefix = f"layer{i}"
        params[f"{prefix}.anchor"] = parameter(uniform((n_anchor, d), d))
        for proj in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.attn.{proj}"] = parameter(uniform((d, d), d))
        for proj in ("bq", "bk", "bv", "bo"):
            params[f"{prefix}.attn.{proj}"] = parameter(np.zeros(d))
        params[f"{prefix}.ffn.w1"] = parameter(uniform((d, config.ffn_hidden), d))
        params[f"{prefix}.ffn.b1"] = parameter(np.zeros(config.ffn_hidden))
        params[f"{prefix}.ffn.w2"] = parameter(uniform((config.ffn_hidden, d), config.ffn_hidden))
        params[f"{prefix}.ffn.b2"] = parameter(np.zeros(d))
        for norm in ("norm1", "norm2"):
            params[f"{prefix}.{norm}.gain"] = parameter(np.ones(d))
            params[f"{prefix}.{norm}.bias"] = parameter(np.zeros(d))
    return params


def params_from_arrays(arrays: dict[str, np.ndarray], trainable: bool = False) -> ParamSet:
    make = parameter if trainable else constant
    return {name: make(np.array(arr, copy=True)) for name, arr in arrays.items()}


def psi(omega: DiffArray, value: float) -> DiffArray:
    """Trig encoding of one scalar: [cos(w_1 v), sin(w_1 v), ...]."""
    enc = trig_encode(omega, np.array([float(value)]))
    return reshape(enc, (enc.shape[1],))


def encode_sequence(
    params: ParamSet,
    config: EncoderConfig,
    loc: np.ndarray,
    t: np.ndarray,
    lon: np.ndarray,
    lat: np.ndarray,
) -> DiffArray:
    """Per-record fused features: N x d_l matrix of summed encodings."""
    parts = []
    if config.use_location:
        parts.append(gather_rows(params["loc_emb"], loc))
    if config.use_time:
        parts.append(trig_encode(params["psi_t.omega"], t))
    if config.use_coords:
        parts.append(
            concat_cols(
                trig_encode(params["psi_cx.omega"], lon),
                trig_encode(params["psi_cy.omega"], lat),
            )
        )
    if config.use_fixed_positional:
        parts.append(constant(fixed_positional_encoding(len(t), config.d_l)))
    out = parts[0]
    for part in parts[1:]:
        out = add(out, part)
    return out


def encode_record(
    params: ParamSet, config: EncoderConfig, loc: int, t: float, lon: float, lat: float
) -> DiffArray:
    """Fused encoding of a single record as a length-d_l vector."""
    row = encode_sequence(
        params,
        config,
        np.array([loc], dtype=np.int64),
        np.array([float(t)]),
        np.array([float(lon)]),
        np.array([float(lat)]),
    )
    return reshape(row, (config.d_l,))


def induced_attention(
    params: ParamSet, prefix: str, x: DiffArray, n_heads: int
) -> DiffArray:
    """Anchors attend over the rows of x; post-norm residuals around each block."""
    anchor = params[f"{prefix}.anchor"]
    att = multi_head_attention(
        anchor,
        x,
        x,
        params[f"{prefix}.attn.wq"],
        params[f"{prefix}.attn.bq"],
        params[f"{prefix}.attn.wk"],
        params[f"{prefix}.attn.bk"],
        params[f"{prefix}.attn.wv"],
        params[f"{prefix}.attn.bv"],
        params[f"{prefix}.attn.wo"],
        params[f"{prefix}.attn.bo"],
        n_heads,
    )
    h = layer_norm(
        add(anchor, att), params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"]
    )
    ff = feed_forward(
        h,
        params[f"{prefix}.ffn.w1"],
        params[f"{prefix}.ffn.b1"],
        params[f"{prefix}.ffn.w2"],
        params[f"{prefix}.ffn.b2"],
    )
    return layer_norm(
        add(h, ff), params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"]
    )


def encode_trajectory(params: ParamSet, config: EncoderConfig, traj: Trajectory) -> DiffArray:
    """Whole-trajectory embedding: stacked induced attention, flattened row-major."""
    x = encode_sequence(params, config, traj.loc, traj.t, traj.lon, traj.lat)
    for i in range(len(config.anchor_lengths)):
        x = induced_attention(params, f"layer{i}", x, config.n_heads)
    return reshape(x, (config.output_dim,))
