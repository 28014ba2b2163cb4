"""Tensor-train surrogates for risk-averse (CVaR) control under uncertainty."""

from .ttcore import (
    TruncationPolicy,
    TtOperator,
    TtVector,
    als_solve,
    tt_add,
    tt_apply,
    tt_dot,
    tt_from_dense,
    tt_hadamard,
    tt_round,
    tt_to_dense,
)
from .cross import CrossConfig, cross_interpolate, maxvol
from .quadrature import TensorGrid, expectation, gauss_hermite, gauss_legendre
from .smoothing import SmoothingParams, exact_cvar_sorted, g_eps, smoothed_cvar

__all__ = [
    "TruncationPolicy",
    "TtOperator",
    "TtVector",
    "als_solve",
    "tt_add",
    "tt_apply",
    "tt_dot",
    "tt_from_dense",
    "tt_hadamard",
    "tt_round",
    "tt_to_dense",
    "CrossConfig",
    "cross_interpolate",
    "maxvol",
    "TensorGrid",
    "expectation",
    "gauss_hermite",
    "gauss_legendre",
    "SmoothingParams",
    "exact_cvar_sorted",
    "g_eps",
    "smoothed_cvar",
]

__version__ = "0.1.0"
