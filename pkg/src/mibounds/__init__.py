"""Variational and annealed importance sampling bounds on mutual information."""

from .models import (Capability, DiscreteJoint, GaussianMixturePosteriorModel, JointModel,
                     LinearGaussianVAE, UnsupportedCapabilityError, model_from_config)
from .results import BoundEstimate, DecomposedBound, Direction, SandwichBounds
from .variational import (ConditionalGaussian, Critic, PriorProposal, TableCritic, TableProposal,
                          constant_critic, load_checkpoint, optimal_critic, save_checkpoint)
from .bounds_static import (ba_lower, ba_upper, giwae_lower, infonce, iwae_lower_mi, iwae_upper_mi,
                            riwae_bounds, s_infonce, s_infonce_upper)
from .ais_engine import AnnealedPath, HMCKernel, PerfectKernel, DiscreteMetropolisKernel, make_schedule
from .multisample_ais import ais_bounds, bdmc, cr_ais, im_ais, ir_ais
from .energy_training import (EnergyPosterior, eval_ibal_ais, mine_dv, mine_f, train_bound,
                              train_mine_ais)
from .harness import run_experiment, sweep_gap_vs_T, decompose_report

__version__ = "0.1.0"
