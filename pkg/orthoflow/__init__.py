__version__ = "1.0.0"

from orthoflow.grid import Box, TensorGrid, Potential, build_grid, eval_potential
from orthoflow.operator import HamiltonianOperator, OrbitalSet, GreenSolver, assemble
from orthoflow.flow import FlowConfig, FlowState
from orthoflow.run import Runner
