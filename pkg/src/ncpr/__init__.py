"""Neural co-state projection regulator.

A network trained without labels maps a state to the projected co-state
trajectory ``lambda^T g(z)`` over a finite horizon; a small box-constrained QP
on its first row gives the feedback control.
"""

from .diffcore import Tape, Var, grad_check
from .neural import MlpParams, cpnn_forward, load_checkpoint, mlp_init, save_checkpoint
from .plant import Pendulum, PlantModel, Unicycle, eval_dynamics, input_gain, rk4_step
from .pmp_loss import CostSpec, Discounted, Uniform, total_loss
from .qp import BoxConstraint, extract_control, solve_box_qp
from .regulator import CpnnController, TrajectoryLog, closed_loop, convergence_error, msd
from .trainer import TrainConfig, grid_states, train
from .baseline_mpc import MpcConfig, MpcController, mpc_solve

__version__ = "0.1.0"
