"""Option pricing on stochastic clocks by rational approximation of the
normalized Black-Scholes formula."""

from .clocks import CGMY, DeterministicClock, Heston, MarketParams, VanillaContract, VarianceGamma
from .pricer import build_cache, price_call, price_put, price_with_cache
from .impliedvol import build_iv_table, implied_vol

__all__ = [
    "CGMY",
    "DeterministicClock",
    "Heston",
    "MarketParams",
    "VanillaContract",
    "VarianceGamma",
    "build_cache",
    "build_iv_table",
    "implied_vol",
    "price_call",
    "price_put",
    "price_with_cache",
]
