"""Learning budget-minimizing Groves and VCG-redistribution auction payment rules."""
from .auction import (
    Allocation,
    AuctionInstance,
    HierarchicalBundles,
    MultiUnitDMU,
    UnitDemand,
    allocate,
    brute_force_allocate,
    bundle_space,
    social_welfare,
)
from .vcg import VCG, MechanismOutcome, groves_payment, h_vcg, vcg_outcome

__version__ = "0.1.0"
