"""Decentralized learning with aggregation in the mirror space."""

from .errors import (ConfigurationError, ConvergenceError, DomainError, IntegrityError,
                     MirrorGossipError, MirrorRangeError, ProtocolError, ShapeError)
from .mirror import MirrorMap, bregman, certify_uniform_convexity, forward, inverse, potential
from .topology import (GraphSchedule, MixingConstants, MixingMatrix, generate_schedule,
                       metropolis_weights, mixing_constants, product_mixing_check)
from .dataflow import (Dataset, LogisticLoss, QuadraticLoss, dirichlet_partition,
                       load_csv, loss_gradient, loss_value, make_synthetic)
from .engine import (DeviceState, RunConfig, RunMetrics, aggregate_row, gossip_round,
                     mirror_gradient_step, pairwise_gossip_round, run, unrolled_state_check)
from .analysis import (TheoryConstants, TheoryReport, centralized_oracle, corollary_rates,
                       lemma1_bound, skew_correction_check, theorem1_bound,
                       weighted_amgm_check)

__version__ = "0.1.0"
